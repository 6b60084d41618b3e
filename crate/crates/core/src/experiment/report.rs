use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::manifest::{find_manifests, Manifest};
use super::median;
use super::pipeline::{AblationTable, ContentSource, EvalRun, RunCurve, CURVE_FILE, EVAL_FILE, TABLE_FILE};
use crate::binio::{read_file, write_file};
use crate::error::{Error, Result};
use crate::eval::{MaskKind, Task};
use crate::train::steps_to_reach;

pub const REPORT_DIR: &str = "report";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

const DASH: &str = "—";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCell {
    pub run: u64,
    pub all: f64,
    pub semantic_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskColumn {
    pub task: Task,
    pub primary: MaskKind,
    pub cells: Vec<TaskCell>,
    pub median: Option<f64>,
    pub median_all: Option<f64>,
    pub median_semantic_only: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub run: u64,
    pub unconstrained_violation_rate: f64,
    pub constrained_violation_rate: f64,
    pub speaker_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBlock {
    pub levels: usize,
    pub runs: Vec<u64>,
    pub columns: Vec<TaskColumn>,
    pub generation: Vec<GenerationRow>,
    pub median_unconstrained_violation_rate: f64,
    pub median_constrained_violation_rate: f64,
    pub median_speaker_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRow {
    pub run: u64,
    pub steps: usize,
    pub fresh_final_loss: f64,
    pub from_text_final_loss: f64,
    /// First evaluated step at which the warm-started run reaches the
    /// fresh run's final held-out loss.
    pub from_text_steps_to_reach: Option<usize>,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitBlock {
    pub levels: usize,
    pub rows: Vec<InitRow>,
    /// Median step ratio; runs that never reach the target count as
    /// infinitely slow.
    pub median_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingCell {
    pub cell: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Stage name → sha256 of its manifest.
    pub manifests: BTreeMap<String, String>,
    pub evals: Vec<EvalBlock>,
    pub init: Vec<InitBlock>,
    pub ablation: Option<AblationTable>,
    pub missing: Vec<MissingCell>,
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| Error::format(path, e.to_string()))
}

fn fmt(x: Option<f64>, digits: usize) -> String {
    match x {
        Some(v) => format!("{v:.digits$}"),
        None => DASH.to_string(),
    }
}

fn missing(out: &mut Vec<MissingCell>, cell: impl Into<String>, reason: impl Into<String>) {
    out.push(MissingCell {
        cell: cell.into(),
        reason: reason.into(),
    });
}

fn eval_block(runs: &[EvalRun], notes: &mut Vec<MissingCell>) -> EvalBlock {
    let levels = runs[0].levels;
    let mut columns = Vec::new();
    for task in Task::ALL {
        let mut cells = Vec::new();
        let mut primary = MaskKind::for_task(task);
        for r in runs {
            match r.report.task(task) {
                Some(t) => {
                    primary = t.primary;
                    cells.push(TaskCell {
                        run: r.run,
                        all: t.all.accuracy,
                        semantic_only: t.semantic_only.accuracy,
                    });
                }
                None => missing(notes, format!("q{levels} s{} {}", r.run, task.name()), "task not evaluated"),
            }
        }
        let all: Vec<f64> = cells.iter().map(|c| c.all).collect();
        let sem: Vec<f64> = cells.iter().map(|c| c.semantic_only).collect();
        let (median_all, median_semantic_only) = (median(&all), median(&sem));
        columns.push(TaskColumn {
            task,
            primary,
            median: match primary {
                MaskKind::All => median_all,
                MaskKind::SemanticOnly => median_semantic_only,
            },
            median_all,
            median_semantic_only,
            cells,
        });
    }
    let generation: Vec<GenerationRow> = runs
        .iter()
        .map(|r| {
            if r.generation.speaker_similarity.is_none() {
                missing(
                    notes,
                    format!("q{levels} s{} speaker similarity", r.run),
                    "no continuation long enough to probe",
                );
            }
            GenerationRow {
                run: r.run,
                unconstrained_violation_rate: r.generation.unconstrained.rate,
                constrained_violation_rate: r.constrained.rate,
                speaker_similarity: r.generation.speaker_similarity,
            }
        })
        .collect();
    let col = |f: fn(&GenerationRow) -> f64| median(&generation.iter().map(f).collect::<Vec<_>>()).expect("nonempty");
    let sims: Vec<f64> = generation.iter().filter_map(|g| g.speaker_similarity).collect();
    EvalBlock {
        levels,
        runs: runs.iter().map(|r| r.run).collect(),
        median_unconstrained_violation_rate: col(|g| g.unconstrained_violation_rate),
        median_constrained_violation_rate: col(|g| g.constrained_violation_rate),
        median_speaker_similarity: median(&sims),
        columns,
        generation,
    }
}

/// `q{Q}_{init}_s{run}` → (Q, init, run).
fn parse_lm_name(name: &str) -> Option<(usize, String, u64)> {
    let rest = name.strip_prefix('q')?;
    let (q, rest) = rest.split_once('_')?;
    let (init, run) = rest.rsplit_once("_s")?;
    Some((q.parse().ok()?, init.to_string(), run.parse().ok()?))
}

fn init_blocks(curves: &BTreeMap<(usize, String, u64), RunCurve>, notes: &mut Vec<MissingCell>) -> Vec<InitBlock> {
    let mut blocks: BTreeMap<usize, Vec<InitRow>> = BTreeMap::new();
    for ((q, init, run), fresh) in curves {
        if init != "fresh" {
            continue;
        }
        let Some(text) = curves.get(&(*q, "text".to_string(), *run)) else {
            continue;
        };
        let (Some(target), Some(text_final)) = (fresh.final_loss(), text.final_loss()) else {
            missing(notes, format!("q{q} s{run} init comparison"), "held-out curve is empty");
            continue;
        };
        let reach = steps_to_reach(&text.heldout, target);
        blocks.entry(*q).or_default().push(InitRow {
            run: *run,
            steps: fresh.steps,
            fresh_final_loss: target,
            from_text_final_loss: text_final,
            from_text_steps_to_reach: reach,
            ratio: reach.map(|s| s as f64 / fresh.steps.max(1) as f64),
        });
    }
    blocks
        .into_iter()
        .map(|(levels, rows)| {
            let ratios: Vec<f64> = rows.iter().map(|r| r.ratio.unwrap_or(f64::INFINITY)).collect();
            let median_ratio = median(&ratios).filter(|m| m.is_finite());
            if median_ratio.is_none() {
                missing(
                    notes,
                    format!("q{levels} init ratio"),
                    "the median warm-started run never reaches the fresh final loss",
                );
            }
            InitBlock {
                levels,
                rows,
                median_ratio,
            }
        })
        .collect()
}

/// Verifies every manifest under `root` and assembles the report from the
/// artifacts found. Nothing in it depends on timing or on the order files
/// were produced in.
pub fn build_report(root: &Path) -> Result<Report> {
    if !root.is_dir() {
        return Err(Error::MissingArtifact {
            path: root.to_path_buf(),
            reason: "artifact root does not exist".into(),
        });
    }
    let mut manifests = BTreeMap::new();
    let mut evals: BTreeMap<usize, Vec<EvalRun>> = BTreeMap::new();
    let mut curves = BTreeMap::new();
    let mut ablation = None;
    for dir in find_manifests(root)? {
        let name = dir.strip_prefix(root).unwrap_or(&dir).to_string_lossy().into_owned();
        if name == REPORT_DIR {
            continue;
        }
        let m = Manifest::load(&dir)?;
        m.verify(&dir)?;
        manifests.insert(name.clone(), Manifest::digest(&dir)?);
        if m.artifacts.contains_key(EVAL_FILE) {
            let run: EvalRun = load_json(&dir.join(EVAL_FILE))?;
            evals.entry(run.levels).or_default().push(run);
        } else if m.artifacts.contains_key(TABLE_FILE) {
            ablation = Some(load_json::<AblationTable>(&dir.join(TABLE_FILE))?);
        } else if m.artifacts.contains_key(CURVE_FILE) {
            let leaf = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if let Some(key) = parse_lm_name(&leaf) {
                curves.insert(key, load_json::<RunCurve>(&dir.join(CURVE_FILE))?);
            }
        }
    }
    let mut notes = Vec::new();
    if evals.is_empty() {
        missing(&mut notes, "paired-likelihood table", "no eval artifacts; run `eval`");
    }
    let evals = evals
        .into_values()
        .map(|mut runs| {
            runs.sort_by_key(|r| r.run);
            eval_block(&runs, &mut notes)
        })
        .collect();
    let init = init_blocks(&curves, &mut notes);
    if init.is_empty() {
        missing(&mut notes, "initialization comparison", "no fresh/from-text run pairs; run `train-lm --init both`");
    }
    match &ablation {
        None => missing(&mut notes, "quantizer ablation", "no ablation table; run `ablate`"),
        Some(t) => {
            for row in &t.rows {
                if row.speaker_similarity.is_none() {
                    missing(&mut notes, format!("ablation Q={} speaker similarity", row.levels), "no continuation long enough to probe");
                }
                if !row.converged {
                    missing(&mut notes, format!("ablation Q={} convergence", row.levels), "held-out loss still falling at the end of the budget");
                }
            }
        }
    }
    Ok(Report {
        manifests,
        evals,
        init,
        ablation,
        missing: notes,
    })
}

pub fn render_ablation(t: &AblationTable) -> String {
    let proxy = t.rows.iter().any(|r| r.content_source == ContentSource::SyntaxProxy);
    let content = if proxy { "content*" } else { "content (judge)" };
    let mut s = String::new();
    let _ = writeln!(s, "Effect of quantizer count (medians over runs)");
    let _ = writeln!(
        s,
        "{:>3}  {:>10}  {:>11}  {:>10}  {:>15}  {:>14}  {:>9}",
        "Q", "recon MSE", "speaker sim", "syntax acc", content, "transcript ppl", "converged"
    );
    for r in &t.rows {
        let _ = writeln!(
            s,
            "{:>3}  {:>10.5}  {:>11}  {:>10.3}  {:>15.3}  {:>14}  {:>9}",
            r.levels,
            r.recon_mse,
            fmt(r.speaker_similarity, 3),
            r.syntax_accuracy,
            r.content,
            fmt(r.transcript_perplexity, 1),
            if r.converged { "yes" } else { "no" }
        );
    }
    if proxy {
        let _ = writeln!(s, "* judge not configured: syntax accuracy stands in for content quality");
    }
    s
}

pub fn render_report(r: &Report) -> String {
    let mut s = String::new();
    for b in &r.evals {
        let _ = writeln!(
            s,
            "Paired-likelihood accuracy, Q={} (consistency: full sequence, semantic: semantic tokens)",
            b.levels
        );
        let _ = write!(s, "{:>8}", "run");
        for c in &b.columns {
            let _ = write!(s, "  {:>10}", c.task.name());
        }
        s.push('\n');
        for &run in &b.runs {
            let _ = write!(s, "{:>8}", format!("s{run}"));
            for c in &b.columns {
                let v = c.cells.iter().find(|x| x.run == run).map(|x| match c.primary {
                    MaskKind::All => x.all,
                    MaskKind::SemanticOnly => x.semantic_only,
                });
                let _ = write!(s, "  {:>10}", fmt(v, 3));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:>8}", "median");
        for c in &b.columns {
            let _ = write!(s, "  {:>10}", fmt(c.median, 3));
        }
        s.push('\n');
        let _ = write!(s, "{:>8}", "other");
        for c in &b.columns {
            let other = match c.primary {
                MaskKind::All => c.median_semantic_only,
                MaskKind::SemanticOnly => c.median_all,
            };
            let _ = write!(s, "  {:>10}", fmt(other, 3));
        }
        let _ = writeln!(s, "\n(other = median under the alternative masking)\n");
        let _ = writeln!(s, "Generation, Q={}", b.levels);
        let _ = writeln!(s, "{:>8}  {:>16}  {:>16}  {:>11}", "run", "violations free", "violations cons", "speaker sim");
        for g in &b.generation {
            let _ = writeln!(
                s,
                "{:>8}  {:>16.5}  {:>16.5}  {:>11}",
                format!("s{}", g.run),
                g.unconstrained_violation_rate,
                g.constrained_violation_rate,
                fmt(g.speaker_similarity, 3)
            );
        }
        let _ = writeln!(
            s,
            "{:>8}  {:>16.5}  {:>16.5}  {:>11}\n",
            "median",
            b.median_unconstrained_violation_rate,
            b.median_constrained_violation_rate,
            fmt(b.median_speaker_similarity, 3)
        );
    }
    for b in &r.init {
        let _ = writeln!(s, "Text-LM initialization, Q={}", b.levels);
        let _ = writeln!(s, "{:>8}  {:>10}  {:>10}  {:>8}  {:>6}", "run", "fresh", "from text", "reach", "ratio");
        for row in &b.rows {
            let reach = row.from_text_steps_to_reach.map_or(DASH.to_string(), |x| x.to_string());
            let _ = writeln!(
                s,
                "{:>8}  {:>10.4}  {:>10.4}  {:>8}  {:>6}",
                format!("s{}", row.run),
                row.fresh_final_loss,
                row.from_text_final_loss,
                reach,
                fmt(row.ratio, 3)
            );
        }
        let _ = writeln!(s, "{:>8}  {:>10}  {:>10}  {:>8}  {:>6}\n", "median", "", "", "", fmt(b.median_ratio, 3));
    }
    if let Some(t) = &r.ablation {
        s.push_str(&render_ablation(t));
        s.push('\n');
    }
    if !r.missing.is_empty() {
        let _ = writeln!(s, "Missing cells ({DASH})");
        for m in &r.missing {
            let _ = writeln!(s, "  {}: {}", m.cell, m.reason);
        }
    }
    s
}

/// Builds the report and writes `report/report.json` and `report/report.txt`.
pub fn write_report(root: &Path) -> Result<(Report, PathBuf)> {
    let report = build_report(root)?;
    let dir = root.join(REPORT_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_file(&dir.join(REPORT_JSON), json.as_bytes())?;
    write_file(&dir.join(REPORT_TEXT), render_report(&report).as_bytes())?;
    let digest = crate::binio::sha256_hex(json.as_bytes());
    let mut m = Manifest::new("report", REPORT_DIR, digest.clone(), digest, None, Value::Null);
    m.add(&dir, REPORT_JSON)?;
    m.add(&dir, REPORT_TEXT)?;
    m.save(&dir)?;
    Ok((report, dir))
}
