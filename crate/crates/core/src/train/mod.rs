//! AdamW training with a warmup-stable-decay schedule, text-LM pretraining,
//! checkpoints and JSONL metrics.

mod optim;
mod schedule;

pub use optim::{adamw_step, clip_grad_norm, new_state, AdamWConfig};
pub use schedule::WsdSchedule;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::model::{batch_loss, extend_vocab, init_model, loss_and_grads, LmCheckpoint, LmConfig, LmParams};
use crate::rng::{rng_for, TAG_BATCH};
use crate::tokens::{interleave, UnifiedVocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub end_lr: f64,
    pub stable_fraction: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Write a resumable checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Held-out evaluation cadence (0: only at the start and the end).
    pub eval_every: usize,
    /// Cap on the number of held-out sequences evaluated.
    pub eval_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            steps: 3000,
            warmup_steps: 150,
            peak_lr: 3e-4,
            end_lr: 3e-5,
            stable_fraction: 0.8,
            optimizer: AdamWConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 100,
            eval_sequences: 64,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> WsdSchedule {
        WsdSchedule {
            total_steps: self.steps,
            warmup_steps: self.warmup_steps,
            peak_lr: self.peak_lr,
            end_lr: self.end_lr,
            stable_fraction: self.stable_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer.beta", "betas must be in [0, 1)"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) || !(o.grad_clip >= 0.0) {
            return Err(Error::config("optimizer", "eps > 0, weight_decay >= 0, grad_clip >= 0"));
        }
        self.schedule().validate()
    }
}

/// One training sequence with the id used in error messages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSeq {
    pub id: String,
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSplit {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
    pub split: MetricSplit,
}

impl MetricRecord {
    /// Same record without the wall-clock field.
    pub fn timeless(&self) -> (usize, f64, f64, MetricSplit) {
        (self.step, self.loss, self.lr, self.split)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Held-out losses as `(step, loss)` pairs.
pub fn heldout_curve(metrics: &[MetricRecord]) -> Vec<(usize, f64)> {
    metrics
        .iter()
        .filter(|m| m.split == MetricSplit::Heldout)
        .map(|m| (m.step, m.loss))
        .collect()
}

/// First evaluated step whose held-out loss is at or below `target`.
pub fn steps_to_reach(curve: &[(usize, f64)], target: f64) -> Option<usize> {
    curve.iter().find(|&&(_, l)| l <= target).map(|&(s, _)| s)
}

pub struct TrainOutput {
    pub checkpoint: LmCheckpoint,
    pub metrics: Vec<MetricRecord>,
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunFiles {
    pub dir: Option<PathBuf>,
}

impl RunFiles {
    pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
        dir.join(format!("step_{step:06}.lmc"))
    }

    pub fn metrics_path(dir: &Path) -> PathBuf {
        dir.join("metrics.jsonl")
    }

    pub fn final_path(dir: &Path) -> PathBuf {
        dir.join("final.lmc")
    }
}

fn check_lengths(seqs: &[TrainSeq], max_len: usize) -> Result<()> {
    for s in seqs {
        if s.ids.len() > max_len {
            return Err(Error::Data {
                utterance: s.id.clone(),
                reason: format!("{} tokens exceed max_seq_len {max_len}", s.ids.len()),
            });
        }
        if s.ids.len() < 2 {
            return Err(Error::Data {
                utterance: s.id.clone(),
                reason: "fewer than 2 tokens".into(),
            });
        }
    }
    Ok(())
}

/// Indices of the batch used at `step`; depends only on `(seed, step)`.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = rng_for(seed, &[TAG_BATCH, step as u64]);
    sample(&mut rng, n, batch.min(n)).into_vec()
}

/// Mean per-token loss over `seqs`, evaluated in chunks of `chunk`.
pub fn mean_loss(p: &LmParams<f32>, seqs: &[TrainSeq], chunk: usize) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Empty("no sequences to evaluate".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for c in seqs.chunks(chunk.max(1)) {
        let refs: Vec<&[u32]> = c.iter().map(|s| s.ids.as_slice()).collect();
        let masks: Vec<Vec<bool>> = c.iter().map(|s| vec![true; s.ids.len() - 1]).collect();
        let (m, n) = batch_loss(p, &refs, &masks)?;
        total += m * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Trains from `start` (fresh or resumed) up to `config.steps`, or only up to
/// `stop_at` when given. Every update, batch and evaluation depends only on
/// the config and the step number, so a resumed run reproduces the
/// uninterrupted one exactly.
pub fn train_lm(
    start: LmCheckpoint,
    train: &[TrainSeq],
    heldout: &[TrainSeq],
    config: &TrainConfig,
    files: &RunFiles,
    stop_at: Option<usize>,
) -> Result<TrainOutput> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set has no sequences".into()));
    }
    let max_len = start.params.config.max_seq_len;
    check_lengths(train, max_len)?;
    check_lengths(heldout, max_len)?;
    let schedule = config.schedule();
    let mut params = start.params;
    let mut state = start.optimizer.unwrap_or_else(|| new_state(params.data.len()));
    if state.m.len() != params.data.len() {
        return Err(Error::Model("optimizer state does not match parameter count".into()));
    }
    let first = state.step as usize;
    let last = stop_at.unwrap_or(config.steps).min(config.steps);
    let eval_set = &heldout[..heldout.len().min(config.eval_sequences)];
    let mut metrics = Vec::new();
    let mut log = match &files.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = RunFiles::metrics_path(dir);
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut emit = |rec: MetricRecord, metrics: &mut Vec<MetricRecord>| -> Result<()> {
        if let Some((f, path)) = log.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        metrics.push(rec);
        Ok(())
    };
    let evaluate = |params: &LmParams<f32>, step: usize| -> Result<Option<MetricRecord>> {
        if eval_set.is_empty() {
            return Ok(None);
        }
        let started = Instant::now();
        let loss = mean_loss(params, eval_set, config.batch_size)?;
        let tokens: usize = eval_set.iter().map(|s| s.ids.len() - 1).sum();
        Ok(Some(MetricRecord {
            step,
            loss,
            lr: schedule.lr_at(step)?,
            tokens_per_sec: tokens as f64 / started.elapsed().as_secs_f64().max(1e-9),
            split: MetricSplit::Heldout,
        }))
    };
    if first == 0 {
        if let Some(rec) = evaluate(&params, 0)? {
            emit(rec, &mut metrics)?;
        }
    }
    for step in first + 1..=last {
        let started = Instant::now();
        let idx = batch_indices(config.seed, step, train.len(), config.batch_size);
        let seqs: Vec<&[u32]> = idx.iter().map(|&i| train[i].ids.as_slice()).collect();
        let masks: Vec<Vec<bool>> = seqs.iter().map(|s| vec![true; s.len() - 1]).collect();
        let (loss, mut grads) = loss_and_grads(&params, &seqs, &masks)?;
        if !loss.is_finite() {
            return Err(Error::Model(format!("non-finite loss at step {step}")));
        }
        clip_grad_norm(&mut grads, config.optimizer.grad_clip);
        let lr = schedule.lr_at(step)?;
        adamw_step(&mut params, &grads, &mut state, &config.optimizer, lr);
        let tokens: usize = masks.iter().map(|m| m.len()).sum();
        emit(
            MetricRecord {
                step,
                loss,
                lr,
                tokens_per_sec: tokens as f64 / started.elapsed().as_secs_f64().max(1e-9),
                split: MetricSplit::Train,
            },
            &mut metrics,
        )?;
        let eval_due = step == config.steps || (config.eval_every > 0 && step % config.eval_every == 0);
        if eval_due {
            if let Some(rec) = evaluate(&params, step)? {
                emit(rec, &mut metrics)?;
            }
        }
        if let Some(dir) = &files.dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                LmCheckpoint {
                    params: params.clone(),
                    optimizer: Some(state.clone()),
                }
                .save(&RunFiles::checkpoint_path(dir, step))?;
            }
        }
    }
    let checkpoint = LmCheckpoint {
        params,
        optimizer: Some(state),
    };
    if let Some(dir) = &files.dir {
        if last == config.steps {
            checkpoint.save(&RunFiles::final_path(dir))?;
        }
    }
    Ok(TrainOutput { checkpoint, metrics })
}

/// Word-id sequences for text pretraining.
pub fn text_sequences<'a>(transcripts: impl IntoIterator<Item = (&'a str, &'a [u32])>) -> Vec<TrainSeq> {
    transcripts
        .into_iter()
        .filter(|(_, w)| w.len() >= 2)
        .map(|(id, w)| TrainSeq {
            id: id.to_string(),
            ids: w.to_vec(),
        })
        .collect()
}

/// Next-token pretraining on transcripts, vocabulary = word ids.
pub fn train_text_lm(
    train: &[TrainSeq],
    heldout: &[TrainSeq],
    model: &LmConfig,
    config: &TrainConfig,
    files: &RunFiles,
) -> Result<TrainOutput> {
    if model.extended_from.is_some() {
        return Err(Error::config("extended_from", "a text model cannot start extended"));
    }
    let start = LmCheckpoint {
        params: init_model(model)?,
        optimizer: None,
    };
    train_lm(start, train, heldout, config, files, None)
}

/// Interleaved `<audio> … </audio>` training sequence for one utterance.
pub fn audio_sequence(vocab: &UnifiedVocab, id: &str, grid: &TokenGrid) -> Result<TrainSeq> {
    Ok(TrainSeq {
        id: id.to_string(),
        ids: interleave(vocab, grid)?,
    })
}

#[derive(Debug, Clone)]
pub enum SlmInit {
    Fresh(LmConfig),
    /// Warm start from a text checkpoint whose vocabulary is the text block.
    FromText(LmCheckpoint),
}

/// Initial checkpoint for speech-LM training.
pub fn slm_start(init: &SlmInit, vocab: &UnifiedVocab) -> Result<LmCheckpoint> {
    let params = match init {
        SlmInit::Fresh(c) => {
            if c.vocab_size != vocab.total_size() as usize {
                return Err(Error::config(
                    "vocab_size",
                    format!("{} but the unified vocabulary has {}", c.vocab_size, vocab.total_size()),
                ));
            }
            init_model(c)?
        }
        SlmInit::FromText(text) => extend_vocab(&text.params, vocab)?,
    };
    Ok(LmCheckpoint {
        params,
        optimizer: None,
    })
}

pub fn train_slm(
    init: &SlmInit,
    vocab: &UnifiedVocab,
    train: &[TrainSeq],
    heldout: &[TrainSeq],
    config: &TrainConfig,
    files: &RunFiles,
) -> Result<TrainOutput> {
    train_lm(slm_start(init, vocab)?, train, heldout, config, files, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use rand::Rng as _;

    fn tiny_model(vocab: usize) -> LmConfig {
        LmConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
            ..Default::default()
        }
    }

    fn tiny_train(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            steps,
            warmup_steps: 2,
            peak_lr: 1e-2,
            end_lr: 1e-3,
            eval_every: 5,
            ..Default::default()
        }
    }

    // Sequences from a deterministic cycle a, a+1, ..., so there is structure
    // to learn.
    fn cyclic(n: usize, vocab: u32, seed: u64) -> Vec<TrainSeq> {
        let mut rng: Rng = rng_for(seed, &[77]);
        (0..n)
            .map(|i| {
                let start = rng.random_range(0..vocab);
                let len = rng.random_range(6..20);
                TrainSeq {
                    id: format!("s{i}"),
                    ids: (0..len).map(|k| (start + k) % vocab).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn loss_falls_on_learnable_data() {
        let data = cyclic(64, 11, 1);
        let held = cyclic(16, 11, 2);
        let out = train_text_lm(&data, &held, &tiny_model(11), &tiny_train(60), &RunFiles::default()).unwrap();
        let curve = heldout_curve(&out.metrics);
        assert_eq!(curve[0].0, 0);
        assert!((curve[0].1 - (11f64).ln()).abs() < 0.2, "{curve:?}");
        assert!(curve.last().unwrap().1 < 0.5 * curve[0].1, "{curve:?}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = cyclic(32, 9, 3);
        let held = cyclic(8, 9, 4);
        let cfg = TrainConfig {
            checkpoint_every: 7,
            ..tiny_train(20)
        };
        let dir = tempfile::tempdir().unwrap();
        let start = slm_start(&SlmInit::Fresh(tiny_model(9)), &UnifiedVocab::new(1, 1, 6).unwrap()).unwrap();
        let full = train_lm(start.clone(), &data, &held, &cfg, &RunFiles::default(), None).unwrap();
        let files = RunFiles {
            dir: Some(dir.path().to_path_buf()),
        };
        train_lm(start, &data, &held, &cfg, &files, Some(14)).unwrap();
        let resumed_from = LmCheckpoint::load(&RunFiles::checkpoint_path(dir.path(), 14)).unwrap();
        assert_eq!(resumed_from.optimizer.as_ref().unwrap().step, 14);
        let rest = train_lm(resumed_from, &data, &held, &cfg, &files, None).unwrap();
        assert_eq!(rest.checkpoint, full.checkpoint);
        let tail: Vec<_> = full.metrics.iter().filter(|m| m.step > 14).map(|m| m.timeless()).collect();
        let got: Vec<_> = rest.metrics.iter().map(|m| m.timeless()).collect();
        assert_eq!(got, tail);
        // the log on disk holds the whole trajectory once
        let logged: Vec<_> = read_metrics(&RunFiles::metrics_path(dir.path())).unwrap().iter().map(|m| m.timeless()).collect();
        let all: Vec<_> = full.metrics.iter().map(|m| m.timeless()).collect();
        assert_eq!(logged, all);
        assert!(RunFiles::final_path(dir.path()).exists());
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let data = cyclic(16, 7, 5);
        let a = train_text_lm(&data, &[], &tiny_model(7), &tiny_train(10), &RunFiles::default()).unwrap();
        let b = train_text_lm(&data, &[], &tiny_model(7), &tiny_train(10), &RunFiles::default()).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    }

    #[test]
    fn over_long_sequence_names_utterance() {
        let mut data = cyclic(4, 7, 6);
        data[2].ids = vec![1; 40];
        let err = train_text_lm(&data, &[], &tiny_model(7), &tiny_train(5), &RunFiles::default()).err().unwrap();
        match err {
            Error::Data { utterance, .. } => assert_eq!(utterance, "s2"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn from_text_start_keeps_text_rows() {
        let vocab = UnifiedVocab::new(7, 2, 4).unwrap();
        let text = train_text_lm(&cyclic(16, 7, 8), &[], &tiny_model(7), &tiny_train(5), &RunFiles::default()).unwrap();
        let start = slm_start(&SlmInit::FromText(text.checkpoint.clone()), &vocab).unwrap();
        assert_eq!(start.params.config.vocab_size, vocab.total_size() as usize);
        let d = 16;
        assert_eq!(
            &start.params.tensor("tok_emb").unwrap()[..7 * d],
            text.checkpoint.params.tensor("tok_emb").unwrap()
        );
        assert!(start.optimizer.is_none());
        let wrong = slm_start(&SlmInit::Fresh(tiny_model(7)), &vocab);
        assert!(wrong.is_err());
    }

    #[test]
    fn batches_are_a_function_of_seed_and_step() {
        assert_eq!(batch_indices(3, 10, 50, 8), batch_indices(3, 10, 50, 8));
        assert_ne!(batch_indices(3, 10, 50, 8), batch_indices(3, 11, 50, 8));
        let mut b = batch_indices(1, 1, 5, 8);
        b.sort();
        assert_eq!(b, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn steps_to_reach_uses_first_hit() {
        let c = vec![(0, 3.0), (10, 2.0), (20, 1.5), (30, 1.6)];
        assert_eq!(steps_to_reach(&c, 1.55), Some(20));
        assert_eq!(steps_to_reach(&c, 1.0), None);
    }
}
