use std::cell::{OnceCell, RefCell};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::ExperimentConfig;
use super::manifest::{versions, Manifest};
use super::median;
use crate::binio::{read_file, sha256_hex, write_file};
use crate::codec::{fit_codec, CodecConfig, RvqCodec};
use crate::corpus::{gen_corpus, generate_utterance, utterance_index, Corpus, Split, UtteranceRecord, FRAMES_DIR, INDEX_FILE};
use crate::error::{Error, Result};
use crate::eval::{paired_accuracy, speaker_similarity, EvalReport, MaskKind, PairBuilder, Task};
use crate::judge::{default_cache_dir, transcribe, transcript_perplexity, JudgeClient, JudgeConfig, JudgeRequest};
use crate::model::{LmCheckpoint, LmParams};
use crate::rng::{derive_seed, TAG_RUN, TAG_SAMPLE};
use crate::sample::{continue_audio, generated_violations, order_violation_rate, prompt_frames, SampleConfig, ViolationStats};
use crate::tokens::{interleave_open, UnifiedVocab};
use crate::train::{
    audio_sequence, heldout_curve, text_sequences, train_slm, train_text_lm, RunFiles, SlmInit, TrainConfig,
    TrainOutput, TrainSeq,
};

pub const CODEC_FILE: &str = "codec.rvq";
pub const CHECKPOINT_FILE: &str = "final.lmc";
pub const CURVE_FILE: &str = "curve.json";
pub const EVAL_FILE: &str = "eval.json";
pub const JUDGE_PAIRS_FILE: &str = "judge_pairs.jsonl";
pub const CELL_FILE: &str = "cell.json";
pub const TABLE_FILE: &str = "table.json";
pub const TABLE_TEXT_FILE: &str = "table.txt";

/// Environment variables read by the command line.
pub const ROOT_ENV: &str = "SPEECHLM_ARTIFACT_ROOT";
pub const JUDGE_KEY_ENV: &str = "SPEECHLM_JUDGE_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Fresh,
    FromText,
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::Fresh => "fresh",
            Init::FromText => "text",
        }
    }

    pub fn parse(s: &str) -> Result<Init> {
        match s {
            "fresh" => Ok(Init::Fresh),
            "text" | "from-text" | "from_text" => Ok(Init::FromText),
            other => Err(Error::config("init", format!("`{other}` is not fresh or from-text"))),
        }
    }
}

/// Held-out loss curve of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCurve {
    pub steps: usize,
    pub heldout: Vec<(usize, f64)>,
}

impl RunCurve {
    pub fn final_loss(&self) -> Option<f64> {
        self.heldout.last().map(|&(_, l)| l)
    }

    /// The last two held-out evaluations differ by under 1 % relative.
    pub fn converged(&self) -> bool {
        match self.heldout.as_slice() {
            [.., (_, a), (_, b)] => b.is_finite() && (a - b) / a.abs().max(1e-12) < 0.01,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prompt: String,
    pub sample: usize,
    pub prompt_text: String,
    pub continuation_text: String,
    pub continuation_frames: usize,
    pub dropped_partial_tokens: usize,
    pub stopped: bool,
    pub order_violations: usize,
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    /// Order violations of the unconstrained continuations.
    pub unconstrained: ViolationStats,
    /// Mean speaker similarity over continuations long enough to probe.
    pub speaker_similarity: Option<f64>,
    pub similarity_count: usize,
    pub similarity_skipped: usize,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub levels: usize,
    pub run: u64,
    pub report: EvalReport,
    pub generation: GenerationStats,
    pub constrained: ViolationStats,
}

/// Prompt/continuation transcripts for the judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgePair {
    pub id: String,
    pub prefix: String,
    pub suffix: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentSource {
    Judge,
    SyntaxProxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub levels: usize,
    pub run: u64,
    pub recon_mse: f64,
    pub speaker_similarity: Option<f64>,
    pub syntax_accuracy: f64,
    pub content: f64,
    pub content_source: ContentSource,
    pub judge_count: usize,
    pub transcript_perplexity: Option<f64>,
    pub final_heldout_loss: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub levels: usize,
    pub runs: Vec<u64>,
    pub recon_mse: f64,
    pub speaker_similarity: Option<f64>,
    pub syntax_accuracy: f64,
    pub content: f64,
    pub content_source: ContentSource,
    pub transcript_perplexity: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Medians over runs, ordered by Q ascending.
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

struct Sequences {
    train: Vec<TrainSeq>,
    heldout: Vec<TrainSeq>,
}

/// Runs the experiment stages under one artifact root. Each stage writes a
/// manifest and is reused on later calls when its inputs are unchanged.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub root: PathBuf,
    pub verbose: bool,
    corpus: OnceCell<Corpus>,
    sequences: RefCell<HashMap<usize, Rc<Sequences>>>,
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| Error::format(path, e.to_string()))
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn lm_dir_name(levels: usize, init: Init, run: u64) -> String {
    format!("q{levels}_{}_s{run}", init.name())
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline {
            config,
            root: root.into(),
            verbose: false,
            corpus: OnceCell::new(),
            sequences: RefCell::new(HashMap::new()),
        })
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[speechlm] {}", msg.as_ref());
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn codec_dir(&self, levels: usize) -> PathBuf {
        self.root.join("codec").join(format!("q{levels}"))
    }

    pub fn text_dir(&self, run: u64) -> PathBuf {
        self.root.join("lm").join(format!("text_s{run}"))
    }

    pub fn slm_dir(&self, levels: usize, init: Init, run: u64) -> PathBuf {
        self.root.join("lm").join(lm_dir_name(levels, init, run))
    }

    pub fn eval_dir(&self, levels: usize, run: u64) -> PathBuf {
        self.root.join("eval").join(format!("q{levels}_s{run}"))
    }

    pub fn cell_dir(&self, levels: usize, run: u64) -> PathBuf {
        self.root.join("ablation").join(format!("q{levels}_s{run}"))
    }

    pub fn table_dir(&self) -> PathBuf {
        self.root.join("ablation").join("table")
    }

    /// Seed of model initialization and batching for run `run`.
    pub fn run_seed(&self, run: u64) -> u64 {
        derive_seed(self.config.seed, &[TAG_RUN, run])
    }

    /// Runs `build` into `dir` unless a manifest with the same key exists.
    /// A manifest with a different key is an error: artifact roots are not
    /// overwritten.
    fn stage(
        &self,
        stage: &str,
        dir: &Path,
        inputs: Value,
        seed: Option<u64>,
        build: impl FnOnce(&Path) -> Result<Vec<String>>,
    ) -> Result<()> {
        let name = dir.strip_prefix(&self.root).unwrap_or(dir).to_string_lossy().into_owned();
        let key = sha256_hex(&serde_json::to_vec(&json!({
            "stage": stage,
            "inputs": inputs,
            "versions": versions(),
        }))?);
        if let Some(m) = Manifest::load_if_present(dir)? {
            if m.key != key {
                return Err(Error::format(
                    Manifest::path(dir),
                    format!("`{name}` was built from different inputs; use a fresh artifact root"),
                ));
            }
            m.verify(dir)?;
            self.note(format!("{name}: up to date"));
            return Ok(());
        }
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.note(format!("{name}: building"));
        let artifacts = build(dir)?;
        let mut m = Manifest::new(stage, &name, key, self.config.digest(), seed, inputs);
        for rel in &artifacts {
            m.add(dir, rel)?;
        }
        m.save(dir)
    }

    pub fn corpus(&self) -> Result<&Corpus> {
        if let Some(c) = self.corpus.get() {
            return Ok(c);
        }
        let dir = self.corpus_dir();
        let cc = &self.config.corpus;
        self.stage("gen-corpus", &dir, json!({ "corpus": cc }), Some(cc.seed), |d| {
            gen_corpus(cc, d)?;
            Ok(vec![INDEX_FILE.into(), FRAMES_DIR.into()])
        })?;
        let c = Corpus::load(&dir)?;
        Ok(self.corpus.get_or_init(|| c))
    }

    fn records(&self, split: Split) -> Result<Vec<&UtteranceRecord>> {
        Ok(self.corpus()?.split(split).collect())
    }

    pub fn vocab(&self, levels: usize) -> Result<UnifiedVocab> {
        self.config.vocab(levels)
    }

    pub fn codec_config(&self, levels: usize) -> CodecConfig {
        CodecConfig {
            levels,
            ..self.config.codec.clone()
        }
    }

    /// Fits (or reuses) the codec with `levels` quantizers on the training
    /// split, with per-frame phoneme labels as the semantic teacher.
    pub fn codec(&self, levels: usize) -> Result<RvqCodec> {
        let corpus = self.corpus()?;
        let dir = self.codec_dir(levels);
        let cc = self.codec_config(levels);
        let inputs = json!({ "codec": cc, "corpus": Manifest::digest(&self.corpus_dir())? });
        self.stage("train-codec", &dir, inputs, Some(cc.seed), |d| {
            let lang = &corpus.language;
            let mut frames = Vec::new();
            let mut teacher = Vec::new();
            for rec in corpus.split(Split::Train) {
                let f = corpus.frames(rec)?;
                let index = utterance_index(&rec.id).ok_or_else(|| Error::Data {
                    utterance: rec.id.clone(),
                    reason: "id does not name a corpus index".into(),
                })?;
                let labels = generate_utterance(lang, index)?.frame_phonemes();
                if labels.len() != f.len() {
                    return Err(Error::Data {
                        utterance: rec.id.clone(),
                        reason: format!("{} teacher labels for {} frames", labels.len(), f.len()),
                    });
                }
                frames.extend_from_slice(&f.data);
                teacher.extend(labels.into_iter().map(u32::from));
            }
            let c = lang.config.clone();
            let codec = fit_codec(&frames, c.dim, c.semantic_dim, Some(&teacher), &cc)?;
            codec.save(&d.join(CODEC_FILE))?;
            Ok(vec![CODEC_FILE.into()])
        })?;
        RvqCodec::load(&dir.join(CODEC_FILE))
    }

    fn sequences(&self, levels: usize) -> Result<Rc<Sequences>> {
        if let Some(s) = self.sequences.borrow().get(&levels) {
            return Ok(s.clone());
        }
        let codec = self.codec(levels)?;
        let vocab = self.vocab(levels)?;
        let corpus = self.corpus()?;
        let encode = |split: Split| -> Result<Vec<TrainSeq>> {
            corpus
                .split(split)
                .map(|r| audio_sequence(&vocab, &r.id, &codec.encode(&corpus.frames(r)?)?))
                .collect()
        };
        let s = Rc::new(Sequences {
            train: encode(Split::Train)?,
            heldout: encode(Split::Heldout)?,
        });
        self.sequences.borrow_mut().insert(levels, s.clone());
        Ok(s)
    }

    fn save_run(&self, dir: &Path, out: &TrainOutput, steps: usize) -> Result<Vec<String>> {
        // the trainer has already written final.lmc and the metrics log
        let curve = RunCurve {
            steps,
            heldout: heldout_curve(&out.metrics),
        };
        save_json(&dir.join(CURVE_FILE), &curve)?;
        Ok(vec![CHECKPOINT_FILE.into(), CURVE_FILE.into()])
    }

    pub fn text_train_config(&self, run: u64) -> TrainConfig {
        TrainConfig {
            seed: self.run_seed(run),
            ..self.config.text_train.clone()
        }
    }

    pub fn train_config(&self, run: u64) -> TrainConfig {
        TrainConfig {
            seed: self.run_seed(run),
            ..self.config.train.clone()
        }
    }

    /// Text LM over word ids of the corpus transcripts.
    pub fn text_lm(&self, run: u64) -> Result<PathBuf> {
        let corpus = self.corpus()?;
        let dir = self.text_dir(run);
        let seed = self.run_seed(run);
        let model = self.config.model.lm_config(self.config.text_size() as usize, seed);
        let tc = self.text_train_config(run);
        let inputs = json!({
            "model": model,
            "train": tc,
            "corpus": Manifest::digest(&self.corpus_dir())?,
        });
        self.stage("train-lm", &dir, inputs, Some(seed), |d| {
            let pick = |split| {
                text_sequences(
                    corpus
                        .split(split)
                        .map(|r: &UtteranceRecord| (r.id.as_str(), r.words.as_slice())),
                )
            };
            let out = train_text_lm(
                &pick(Split::Train),
                &pick(Split::Heldout),
                &model,
                &tc,
                &RunFiles {
                    dir: Some(d.to_path_buf()),
                },
            )?;
            self.save_run(d, &out, tc.steps)
        })?;
        Ok(dir)
    }

    /// Speech LM over `levels`-quantizer tokens.
    pub fn slm(&self, levels: usize, init: Init, run: u64) -> Result<PathBuf> {
        self.config.validate_quantizers(&[levels])?;
        self.codec(levels)?;
        let dir = self.slm_dir(levels, init, run);
        let seed = self.run_seed(run);
        let vocab = self.vocab(levels)?;
        let model = self.config.model.lm_config(vocab.total_size() as usize, seed);
        let tc = self.train_config(run);
        let text_dir = match init {
            Init::FromText => Some(self.text_lm(run)?),
            Init::Fresh => None,
        };
        let inputs = json!({
            "model": model,
            "train": tc,
            "init": init,
            "codec": Manifest::digest(&self.codec_dir(levels))?,
            "text": text_dir.as_deref().map(Manifest::digest).transpose()?,
        });
        self.stage("train-lm", &dir, inputs, Some(seed), |d| {
            let seqs = self.sequences(levels)?;
            let start = match &text_dir {
                None => SlmInit::Fresh(model.clone()),
                Some(t) => SlmInit::FromText(LmCheckpoint {
                    params: LmCheckpoint::load(&t.join(CHECKPOINT_FILE))?.params,
                    optimizer: None,
                }),
            };
            let files = RunFiles {
                dir: Some(d.to_path_buf()),
            };
            let out = train_slm(&start, &vocab, &seqs.train, &seqs.heldout, &tc, &files)?;
            self.save_run(d, &out, tc.steps)
        })?;
        Ok(dir)
    }

    pub fn load_params(dir: &Path) -> Result<LmParams<f32>> {
        Ok(LmCheckpoint::load(&dir.join(CHECKPOINT_FILE))?.params)
    }

    pub fn load_curve(dir: &Path) -> Result<RunCurve> {
        load_json(&dir.join(CURVE_FILE))
    }

    /// Held-out utterances long enough for a prompt plus a minimal
    /// continuation, in index order.
    fn prompt_records(&self) -> Result<Vec<&UtteranceRecord>> {
        let e = &self.config.eval;
        let need = prompt_frames(e.prompt_seconds, self.config.corpus.frame_rate_hz) + e.min_continuation_frames;
        let recs: Vec<&UtteranceRecord> = self
            .records(Split::Heldout)?
            .into_iter()
            .filter(|r| r.n_frames >= need)
            .take(e.prompts)
            .collect();
        if recs.is_empty() {
            return Err(Error::Capacity {
                what: format!("held-out utterances with at least {need} frames"),
                requested: e.prompts,
                available: 0,
            });
        }
        Ok(recs)
    }

    pub fn sample_config(&self, run: u64) -> SampleConfig {
        SampleConfig {
            seed: derive_seed(self.run_seed(run), &[TAG_SAMPLE]),
            ..self.config.sample.clone()
        }
    }

    /// Unconstrained continuations of the held-out prompts with their
    /// transcripts, order violations and speaker similarity.
    pub fn generation_stats(
        &self,
        params: &LmParams<f32>,
        codec: &RvqCodec,
        run: u64,
    ) -> Result<GenerationStats> {
        let corpus = self.corpus()?;
        let lang = &corpus.language;
        let vocab = self.vocab(codec.levels())?;
        let e = &self.config.eval;
        let base = self.sample_config(run);
        let mut samples = Vec::new();
        let (mut violations, mut positions) = (0, 0);
        let mut sims = Vec::new();
        let mut skipped = 0;
        for (pi, rec) in self.prompt_records()?.into_iter().enumerate() {
            let frames = corpus.frames(rec)?;
            let prompt = frames.slice(0, prompt_frames(e.prompt_seconds, frames.frame_rate_hz));
            for s in 0..e.samples_per_prompt {
                let cfg = SampleConfig {
                    seed: derive_seed(base.seed, &[pi as u64, s as u64]),
                    constrain_order: false,
                    ..base.clone()
                };
                let cont = continue_audio(params, codec, &vocab, &frames, e.prompt_seconds, &cfg)?;
                let (v, n) = generated_violations(&vocab, &cont.generation);
                violations += v;
                positions += n;
                let similarity = match &cont.frames {
                    Some(f) if f.len() >= e.min_continuation_frames => {
                        match speaker_similarity(lang, &prompt, f) {
                            Ok(x) => Some(x),
                            Err(Error::Degenerate(_)) => None,
                            Err(other) => return Err(other),
                        }
                    }
                    _ => None,
                };
                match similarity {
                    Some(x) => sims.push(x),
                    None => skipped += 1,
                }
                let prompt_text = transcribe(codec, lang, &cont.prompt_grid)?.text;
                let continuation_text = if cont.grid.frames() > 0 {
                    transcribe(codec, lang, &cont.grid)?.text
                } else {
                    String::new()
                };
                samples.push(SampleRecord {
                    prompt: rec.id.clone(),
                    sample: s,
                    prompt_text,
                    continuation_text,
                    continuation_frames: cont.stats.continuation_frames,
                    dropped_partial_tokens: cont.stats.dropped_partial_tokens,
                    stopped: cont.stats.stopped,
                    order_violations: v,
                    similarity,
                });
            }
        }
        let n_samples = samples.len();
        Ok(GenerationStats {
            unconstrained: ViolationStats {
                rate: if positions == 0 { 0.0 } else { violations as f64 / positions as f64 },
                violations,
                positions,
                samples: n_samples,
            },
            speaker_similarity: (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64),
            similarity_count: sims.len(),
            similarity_skipped: skipped,
            samples,
        })
    }

    fn pair_builder<'a>(&'a self, codec: &'a RvqCodec) -> Result<PairBuilder<'a>> {
        let corpus = self.corpus()?;
        let sources = corpus
            .split(Split::Heldout)
            .filter_map(|r| utterance_index(&r.id))
            .collect();
        Ok(PairBuilder {
            lang: &corpus.language,
            codec,
            vocab: self.vocab(codec.levels())?,
            sources,
            seed: self.config.eval.pair_seed,
        })
    }

    /// Paired-likelihood tasks, order violations and generation statistics
    /// of the fresh speech LM for run `run` at the main quantizer count.
    pub fn eval(&self, run: u64) -> Result<EvalRun> {
        let levels = self.config.codec.levels;
        let codec = self.codec(levels)?;
        let lm_dir = self.slm(levels, Init::Fresh, run)?;
        let dir = self.eval_dir(levels, run);
        let inputs = json!({
            "eval": self.config.eval,
            "sample": self.sample_config(run),
            "codec": Manifest::digest(&self.codec_dir(levels))?,
            "lm": Manifest::digest(&lm_dir)?,
        });
        self.stage("eval", &dir, inputs, Some(self.run_seed(run)), |d| {
            let params = Self::load_params(&lm_dir)?;
            let vocab = self.vocab(levels)?;
            let builder = self.pair_builder(&codec)?;
            let primary = self.config.eval.mask_kind()?;
            let mut tasks = Vec::new();
            for task in self.config.eval.task_list()? {
                let pairs = builder.build(task, self.config.eval.pairs_per_task)?;
                tasks.push(paired_accuracy(&params, &vocab, &pairs, primary)?);
            }
            let generation = self.generation_stats(&params, &codec, run)?;
            let corpus = self.corpus()?;
            let mut prompts = Vec::new();
            for rec in self.prompt_records()? {
                let f = corpus.frames(rec)?;
                let n = prompt_frames(self.config.eval.prompt_seconds, f.frame_rate_hz);
                prompts.push(interleave_open(&vocab, &codec.encode(&f.slice(0, n))?)?);
            }
            let constrained_cfg = SampleConfig {
                constrain_order: true,
                ..self.sample_config(run)
            };
            let constrained = order_violation_rate(
                &params,
                &vocab,
                &prompts,
                &constrained_cfg,
                self.config.eval.samples_per_prompt,
            )?;
            let result = EvalRun {
                levels,
                run,
                report: EvalReport {
                    tasks,
                    model_digest: Some(Manifest::load(&lm_dir)?.artifacts[CHECKPOINT_FILE].clone()),
                    config_digest: Some(self.config.digest()),
                },
                generation,
                constrained,
            };
            save_json(&d.join(EVAL_FILE), &result)?;
            let mut lines = String::new();
            for s in &result.generation.samples {
                let pair = JudgePair {
                    id: format!("{}#{}", s.prompt, s.sample),
                    prefix: s.prompt_text.clone(),
                    suffix: s.continuation_text.clone(),
                };
                lines.push_str(&serde_json::to_string(&pair)?);
                lines.push('\n');
            }
            write_file(&d.join(JUDGE_PAIRS_FILE), lines.as_bytes())?;
            Ok(vec![EVAL_FILE.into(), JUDGE_PAIRS_FILE.into()])
        })?;
        load_json(&dir.join(EVAL_FILE))
    }

    fn judge_client(&self) -> Option<JudgeClient> {
        let j = &self.config.judge;
        let endpoint = j.endpoint.as_ref()?;
        let mut cfg = JudgeConfig::new(endpoint, j.model.as_deref().unwrap_or("gpt-4o"));
        cfg.api_key = crate::judge::api_key_from_env(JUDGE_KEY_ENV);
        if let Some(r) = j.max_retries {
            cfg.max_retries = r;
        }
        cfg.cache_dir = Some(default_cache_dir(&self.root));
        Some(JudgeClient::new(cfg))
    }

    /// Judge scores of transcript pairs with a nonempty continuation.
    pub fn judge_pairs(&self, pairs: &[JudgePair]) -> Result<Vec<(String, u8)>> {
        let client = self
            .judge_client()
            .ok_or_else(|| Error::config("judge.endpoint", "no judge endpoint configured"))?;
        let model = client.config().model.clone();
        let mut out = Vec::new();
        for p in pairs.iter().filter(|p| !p.suffix.is_empty()) {
            let s = client.judge(&JudgeRequest::new(&p.prefix, &p.suffix, &model))?;
            out.push((p.id.clone(), s.score));
        }
        Ok(out)
    }

    /// One (Q, run) cell of the quantizer ablation.
    pub fn ablation_cell(&self, levels: usize, run: u64) -> Result<AblationCell> {
        let codec = self.codec(levels)?;
        let lm_dir = self.slm(levels, Init::Fresh, run)?;
        let text_dir = self.text_lm(run)?;
        let dir = self.cell_dir(levels, run);
        let judge = &self.config.judge;
        let inputs = json!({
            "eval": self.config.eval,
            "sample": self.sample_config(run),
            "judge": { "endpoint": judge.endpoint, "model": judge.model },
            "codec": Manifest::digest(&self.codec_dir(levels))?,
            "lm": Manifest::digest(&lm_dir)?,
            "text": Manifest::digest(&text_dir)?,
        });
        self.stage("ablate", &dir, inputs, Some(self.run_seed(run)), |d| {
            let corpus = self.corpus()?;
            let params = Self::load_params(&lm_dir)?;
            let text = Self::load_params(&text_dir)?;
            let curve = Self::load_curve(&lm_dir)?;
            let (mut sq, mut n) = (0.0, 0usize);
            for rec in corpus.split(Split::Heldout) {
                let f = corpus.frames(rec)?;
                sq += codec.recon_mse(&f, levels)? * (f.len() * f.dim) as f64;
                n += f.len() * f.dim;
            }
            if n == 0 {
                return Err(Error::Empty("held-out split has no frames".into()));
            }
            let vocab = self.vocab(levels)?;
            let pairs = self.pair_builder(&codec)?.build(Task::Syntax, self.config.eval.pairs_per_task)?;
            let syntax = paired_accuracy(&params, &vocab, &pairs, Some(MaskKind::SemanticOnly))?.accuracy;
            let generation = self.generation_stats(&params, &codec, run)?;
            let mut ppl = Vec::new();
            for s in &generation.samples {
                let words = corpus.language.parse_words(&s.continuation_text)?;
                if words.len() >= 2 {
                    ppl.push(transcript_perplexity(&text, &words)?);
                }
            }
            let (content, content_source, judge_count) = if judge.endpoint.is_some() {
                let pairs: Vec<JudgePair> = generation
                    .samples
                    .iter()
                    .map(|s| JudgePair {
                        id: format!("{}#{}", s.prompt, s.sample),
                        prefix: s.prompt_text.clone(),
                        suffix: s.continuation_text.clone(),
                    })
                    .collect();
                let scores = self.judge_pairs(&pairs)?;
                if scores.is_empty() {
                    return Err(Error::Empty("no continuation has a transcript to judge".into()));
                }
                let mean = scores.iter().map(|&(_, s)| s as f64).sum::<f64>() / scores.len() as f64;
                (mean, ContentSource::Judge, scores.len())
            } else {
                (syntax, ContentSource::SyntaxProxy, 0)
            };
            let cell = AblationCell {
                levels,
                run,
                recon_mse: sq / n as f64,
                speaker_similarity: generation.speaker_similarity,
                syntax_accuracy: syntax,
                content,
                content_source,
                judge_count,
                transcript_perplexity: (!ppl.is_empty()).then(|| ppl.iter().sum::<f64>() / ppl.len() as f64),
                final_heldout_loss: curve.final_loss(),
                converged: curve.converged(),
            };
            save_json(&d.join(CELL_FILE), &cell)?;
            Ok(vec![CELL_FILE.into()])
        })?;
        load_json(&dir.join(CELL_FILE))
    }

    /// Runs every ablation cell and writes the table of per-Q medians.
    pub fn ablate(&self) -> Result<AblationTable> {
        let mut qs = self.config.ablation.quantizers.clone();
        qs.sort_unstable();
        qs.dedup();
        self.config.validate_quantizers(&qs)?;
        let runs = self.config.ablation.seeds.clone();
        let mut cells = Vec::new();
        let mut digests = Vec::new();
        for &q in &qs {
            for &r in &runs {
                cells.push(self.ablation_cell(q, r)?);
                digests.push(Manifest::digest(&self.cell_dir(q, r))?);
            }
        }
        let dir = self.table_dir();
        let inputs = json!({ "quantizers": qs, "runs": runs, "cells": digests });
        self.stage("ablate", &dir, inputs, None, |d| {
            let table = ablation_table(&qs, cells)?;
            save_json(&d.join(TABLE_FILE), &table)?;
            write_file(&d.join(TABLE_TEXT_FILE), super::report::render_ablation(&table).as_bytes())?;
            Ok(vec![TABLE_FILE.into(), TABLE_TEXT_FILE.into()])
        })?;
        load_json(&dir.join(TABLE_FILE))
    }
}

fn median_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    median(&v)
}

/// Per-Q medians over runs.
pub fn ablation_table(levels: &[usize], cells: Vec<AblationCell>) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &q in levels {
        let cs: Vec<&AblationCell> = cells.iter().filter(|c| c.levels == q).collect();
        let first = cs
            .first()
            .ok_or_else(|| Error::Empty(format!("no ablation cells for Q={q}")))?;
        let col = |f: fn(&AblationCell) -> f64| median(&cs.iter().map(|c| f(c)).collect::<Vec<_>>()).expect("nonempty");
        rows.push(AblationRow {
            levels: q,
            runs: cs.iter().map(|c| c.run).collect(),
            recon_mse: col(|c| c.recon_mse),
            speaker_similarity: median_opt(cs.iter().map(|c| c.speaker_similarity)),
            syntax_accuracy: col(|c| c.syntax_accuracy),
            content: col(|c| c.content),
            content_source: first.content_source,
            transcript_perplexity: median_opt(cs.iter().map(|c| c.transcript_perplexity)),
            converged: cs.iter().all(|c| c.converged),
        });
    }
    Ok(AblationTable { rows, cells })
}
