use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use speechlm::binio::{read_file, write_file};
use speechlm::corpus::{read_frames, write_frames};
use speechlm::experiment::{
    write_report, ExperimentConfig, Init, JudgePair, Manifest, Pipeline, CHECKPOINT_FILE, REPORT_TEXT, ROOT_ENV,
};
use speechlm::model::LmCheckpoint;
use speechlm::sample::continue_audio;
use speechlm::tokens::{write_stream, TokenStream};

#[derive(Parser)]
#[command(name = "speechlm", version, about = "Speech language model experiments over a synthetic speech world")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact root directory.
    #[arg(long, global = true, env = ROOT_ENV, default_value = "artifacts")]
    root: PathBuf,
    /// Base seed of all language-model runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run indices (repeated runs and ablation cells), e.g. `0,1,2`.
    #[arg(long, global = true, value_delimiter = ',')]
    runs: Option<Vec<u64>>,
    /// Quantizer counts, e.g. `2,4,8`.
    #[arg(long, global = true, value_delimiter = ',')]
    quantizers: Option<Vec<usize>>,
    /// Speech-LM training steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Sampling temperature.
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Sample from the k most likely tokens.
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// Judge chat-completion URL.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus,
    /// Fit the residual quantizer (at `--quantizers`, default the config's Q).
    TrainCodec,
    /// Train language models for every run index.
    TrainLm {
        /// fresh, from-text, text (text LM only) or both.
        #[arg(long, default_value = "fresh")]
        init: String,
    },
    /// Continue a prompt frame file with a trained speech LM.
    Sample {
        /// SFR1 frame file.
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        seconds: f64,
        #[arg(long)]
        constrain_order: bool,
        /// Checkpoint to sample from; defaults to the fresh model of the
        /// first run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory; defaults to `<root>/samples/<prompt name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired-likelihood tasks, order violations and speaker similarity.
    Eval {
        /// `all` or a comma-separated task list.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        /// per-task, all or semantic-only.
        #[arg(long)]
        mask: Option<String>,
    },
    /// Quantizer-count ablation.
    Ablate,
    /// Score prompt/continuation transcript pairs with the judge.
    Judge {
        /// JSONL of `{id, prefix, suffix}`.
        #[arg(long)]
        pairs: PathBuf,
        /// Output JSONL; defaults to `<root>/judge/scores.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify artifacts and render the tables.
    Report,
}

fn load_config(g: &Global) -> anyhow::Result<ExperimentConfig> {
    let mut c = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(r) = &g.runs {
        c.run_seeds = r.clone();
        c.ablation.seeds = r.clone();
    }
    if let Some(q) = &g.quantizers {
        c.ablation.quantizers = q.clone();
    }
    if let Some(s) = g.steps {
        c.train.steps = s;
    }
    if let Some(t) = g.temperature {
        c.sample.temperature = t;
    }
    if let Some(k) = g.top_k {
        c.sample.top_k = k;
    }
    if let Some(e) = &g.endpoint {
        c.judge.endpoint = Some(e.clone());
    }
    c.validate()?;
    Ok(c)
}

fn levels(g: &Global, c: &ExperimentConfig) -> Vec<usize> {
    g.quantizers.clone().unwrap_or_else(|| vec![c.codec.levels])
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let config = load_config(g)?;
    let mut p = Pipeline::new(config.clone(), g.root.clone())?;
    p.verbose = g.verbose;
    match cli.command {
        Command::GenCorpus => {
            let c = p.corpus()?;
            println!("corpus: {} utterances in {}", c.records.len(), p.corpus_dir().display());
        }
        Command::TrainCodec => {
            for q in levels(g, &config) {
                let codec = p.codec(q)?;
                println!(
                    "codec Q={q} K={}: {}",
                    codec.codebook_size(),
                    p.codec_dir(q).display()
                );
            }
        }
        Command::TrainLm { init } => {
            let inits: Vec<Init> = match init.as_str() {
                "both" => vec![Init::Fresh, Init::FromText],
                "text" => vec![],
                other => vec![Init::parse(other)?],
            };
            for &run in &config.run_seeds {
                if init == "text" {
                    println!("text lm: {}", p.text_lm(run)?.display());
                }
                for q in levels(g, &config) {
                    for &i in &inits {
                        let dir = p.slm(q, i, run)?;
                        let curve = Pipeline::load_curve(&dir)?;
                        let loss = curve.final_loss().map_or("—".to_string(), |l| format!("{l:.4}"));
                        println!("speech lm {}: held-out loss {loss}", dir.display());
                    }
                }
            }
        }
        Command::Sample {
            prompt,
            seconds,
            constrain_order,
            checkpoint,
            out,
        } => {
            let q = config.codec.levels;
            let codec = p.codec(q)?;
            let ckpt = match checkpoint {
                Some(path) => path,
                None => {
                    let run = *config.run_seeds.first().expect("validated nonempty");
                    p.slm(q, Init::Fresh, run)?.join(CHECKPOINT_FILE)
                }
            };
            let params = LmCheckpoint::load(&ckpt)?.params;
            let frames = read_frames(&prompt, config.corpus.frame_rate_hz)?;
            let mut sc = p.sample_config(*config.run_seeds.first().expect("validated nonempty"));
            sc.constrain_order = constrain_order;
            let vocab = p.vocab(q)?;
            let cont = continue_audio(&params, &codec, &vocab, &frames, seconds, &sc)?;
            let stem = prompt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let dir = out.unwrap_or_else(|| g.root.join("samples").join(stem));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            write_stream(
                &dir.join("continuation.its"),
                &TokenStream {
                    grid: cont.grid.clone(),
                    codebook_size: codec.codebook_size() as u16,
                    frame_rate_hz: config.corpus.frame_rate_hz,
                },
            )?;
            let mut artifacts = vec!["continuation.its", "stats.json"];
            if let Some(f) = &cont.frames {
                write_frames(&dir.join("continuation.sfr"), f)?;
                artifacts.push("continuation.sfr");
            }
            let stats = serde_json::to_string_pretty(&cont.stats)? + "\n";
            write_file(&dir.join("stats.json"), stats.as_bytes())?;
            let inputs = json!({
                "checkpoint": speechlm::binio::file_digest(&ckpt)?,
                "prompt": speechlm::binio::file_digest(&prompt)?,
                "seconds": seconds,
                "sample": sc,
            });
            let key = speechlm::binio::sha256_hex(&serde_json::to_vec(&inputs)?);
            let mut m = Manifest::new("sample", &dir.to_string_lossy(), key, config.digest(), Some(sc.seed), inputs);
            for a in artifacts {
                m.add(&dir, a)?;
            }
            m.save(&dir)?;
            println!(
                "sample: {} continuation frames, stopped={}, {} order violations -> {}",
                cont.stats.continuation_frames,
                cont.stats.stopped,
                cont.stats.order_violations,
                dir.display()
            );
        }
        Command::Eval { tasks, mask } => {
            let mut c = config.clone();
            if let Some(t) = tasks {
                c.eval.tasks = t;
            }
            if let Some(m) = mask {
                c.eval.mask = m;
            }
            let mut p = Pipeline::new(c.clone(), g.root.clone())?;
            p.verbose = g.verbose;
            for &run in &c.run_seeds {
                let e = p.eval(run)?;
                let accs: Vec<String> = e
                    .report
                    .tasks
                    .iter()
                    .map(|t| format!("{} {:.3}", t.task.name(), t.accuracy))
                    .collect();
                println!(
                    "eval s{run}: {}; violations {:.4} (constrained {:.4})",
                    accs.join(", "),
                    e.generation.unconstrained.rate,
                    e.constrained.rate
                );
            }
        }
        Command::Ablate => {
            let t = p.ablate()?;
            print!("{}", speechlm::experiment::render_ablation(&t));
        }
        Command::Judge { pairs, out } => {
            let text = String::from_utf8(read_file(&pairs)?).context("pairs file is not UTF-8")?;
            let mut list = Vec::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let pair: JudgePair =
                    serde_json::from_str(line).with_context(|| format!("{} line {}", pairs.display(), n + 1))?;
                list.push(pair);
            }
            let scores = p.judge_pairs(&list)?;
            if scores.is_empty() {
                bail!("no pair with a nonempty continuation to judge");
            }
            let out = out.unwrap_or_else(|| g.root.join("judge").join("scores.jsonl"));
            let mut lines = String::new();
            for (id, s) in &scores {
                lines.push_str(&serde_json::to_string(&json!({ "id": id, "score": s }))?);
                lines.push('\n');
            }
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            write_file(&out, lines.as_bytes())?;
            let mean = scores.iter().map(|&(_, s)| s as f64).sum::<f64>() / scores.len() as f64;
            println!("judge: {} pairs, mean score {mean:.2} -> {}", scores.len(), out.display());
        }
        Command::Report => {
            let (_, dir) = write_report(&g.root)?;
            let text = std::fs::read_to_string(dir.join(REPORT_TEXT)).context("reading rendered report")?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
