//! Autoregressive sampling over the unified vocabulary.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::{RvqCodec, TokenGrid};
use crate::corpus::FeatureFrameSeq;
use crate::error::{Error, Result};
use crate::model::{KvDecoder, LmParams};
use crate::rng::{derive_seed, rng_for, TAG_SAMPLE};
use crate::tokens::{interleave_open, violation_flags, TokenId, TokenKind, UnifiedVocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub temperature: f64,
    pub top_k: usize,
    /// 0 means `Q·250 + 1`.
    pub max_new_tokens: usize,
    pub constrain_order: bool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            temperature: 0.8,
            top_k: 30,
            max_new_tokens: 0,
            constrain_order: false,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be a finite value > 0"));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::config("top_k", format!("must be in 1..={vocab_size}")));
        }
        Ok(())
    }

    pub fn new_token_cap(&self, vocab: &UnifiedVocab) -> usize {
        if self.max_new_tokens > 0 {
            self.max_new_tokens
        } else {
            vocab.q() * 250 + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated ids.
    pub ids: Vec<TokenId>,
    pub prompt_len: usize,
    /// Log-probability of each chosen id under the filtered distribution.
    pub log_probs: Vec<f64>,
    pub stopped: bool,
}

impl Generation {
    pub fn new_ids(&self) -> &[TokenId] {
        &self.ids[self.prompt_len..]
    }
}

/// Temperature + top-k filtered distribution over `logits` with disallowed
/// ids removed. Returns `(id, probability)` for the kept ids, highest logit
/// first (ties toward the lower id).
pub fn filtered_distribution(
    logits: &[f32],
    temperature: f64,
    top_k: usize,
    allowed: Option<&dyn Fn(usize) -> bool>,
) -> Result<Vec<(usize, f64)>> {
    let mut cand: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed.is_none_or(|f| f(i)))
        .map(|(i, &l)| (i, l as f64 / temperature))
        .filter(|(_, l)| l.is_finite())
        .collect();
    if cand.is_empty() {
        return Err(Error::Model("every token is masked".into()));
    }
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(top_k);
    let m = cand[0].1;
    let z: f64 = cand.iter().map(|&(_, l)| (l - m).exp()).sum();
    Ok(cand.into_iter().map(|(i, l)| (i, (l - m).exp() / z)).collect())
}

fn draw(dist: &[(usize, f64)], u: f64) -> (usize, f64) {
    let mut acc = 0.0;
    for &(i, p) in dist {
        acc += p;
        if u < acc {
            return (i, p);
        }
    }
    *dist.last().expect("nonempty distribution")
}

/// Level expected at the next position of an open audio span, checking that
/// `prompt` is `<audio>` followed by audio ids in cyclic order.
fn expected_level_after(vocab: &UnifiedVocab, prompt: &[TokenId]) -> Result<usize> {
    if prompt.first() != Some(&vocab.audio_open()) {
        return Err(Error::Sequence("constrained prompt must start with <audio>".into()));
    }
    let q = vocab.q();
    for (i, &id) in prompt[1..].iter().enumerate() {
        match vocab.kind(id) {
            TokenKind::Audio { level, .. } if level == i % q => {}
            _ => {
                return Err(Error::Sequence(format!(
                    "prompt position {} holds id {id}, expected a level-{} audio token",
                    i + 1,
                    i % q + 1
                )))
            }
        }
    }
    Ok((prompt.len() - 1) % q)
}

pub fn generate(params: &LmParams<f32>, vocab: &UnifiedVocab, prompt: &[TokenId], config: &SampleConfig) -> Result<Generation> {
    config.validate(params.config.vocab_size)?;
    if prompt.is_empty() {
        return Err(Error::Sequence("prompt is empty".into()));
    }
    let mut level = if config.constrain_order {
        Some(expected_level_after(vocab, prompt)?)
    } else {
        None
    };
    let cap = config.new_token_cap(vocab);
    let max_len = params.config.max_seq_len;
    if prompt.len() > max_len {
        return Err(Error::Sequence(format!("prompt of {} ids exceeds max_seq_len {max_len}", prompt.len())));
    }
    let mut rng = rng_for(config.seed, &[TAG_SAMPLE]);
    let mut dec = KvDecoder::new(params);
    let mut logits = Vec::new();
    for &id in prompt {
        logits = dec.step(id)?;
    }
    let mut ids = prompt.to_vec();
    let mut log_probs = Vec::new();
    let mut stopped = false;
    let close = vocab.audio_close() as usize;
    while log_probs.len() < cap {
        let dist = match level {
            Some(l) => {
                let block = vocab.level_block(l);
                let (lo, hi) = (block.start as usize, block.end as usize);
                let ok = move |i: usize| (lo..hi).contains(&i) || (l == 0 && i == close);
                filtered_distribution(&logits, config.temperature, config.top_k, Some(&ok))?
            }
            None => filtered_distribution(&logits, config.temperature, config.top_k, None)?,
        };
        let (next, p) = draw(&dist, rng.random::<f64>());
        ids.push(next as TokenId);
        log_probs.push(p.ln());
        if next == close {
            stopped = true;
            break;
        }
        if let Some(l) = level.as_mut() {
            *l = (*l + 1) % vocab.q();
        }
        // the last id needs no logits; stop before the cache overflows
        if log_probs.len() == cap || ids.len() >= max_len {
            break;
        }
        logits = dec.step(next as TokenId)?;
    }
    Ok(Generation {
        prompt_len: prompt.len(),
        ids,
        log_probs,
        stopped,
    })
}

/// Violations and scanned positions among the generated part of `g`.
pub fn generated_violations(vocab: &UnifiedVocab, g: &Generation) -> (usize, usize) {
    let (flags, _) = violation_flags(vocab, &g.ids);
    let start = g.prompt_len.saturating_sub(usize::from(g.ids.first() == Some(&vocab.audio_open())));
    let tail = flags.get(start..).unwrap_or(&[]);
    (tail.iter().filter(|&&v| v).count(), tail.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationStats {
    pub rate: f64,
    pub violations: usize,
    pub positions: usize,
    pub samples: usize,
}

/// Fraction of generated interior positions breaking the level cycle, over
/// `n_samples` draws per prompt.
pub fn order_violation_rate(
    params: &LmParams<f32>,
    vocab: &UnifiedVocab,
    prompts: &[Vec<TokenId>],
    config: &SampleConfig,
    n_samples: usize,
) -> Result<ViolationStats> {
    let mut violations = 0;
    let mut positions = 0;
    for (pi, prompt) in prompts.iter().enumerate() {
        for s in 0..n_samples {
            let cfg = SampleConfig {
                seed: derive_seed(config.seed, &[pi as u64, s as u64]),
                ..config.clone()
            };
            let g = generate(params, vocab, prompt, &cfg)?;
            let (v, n) = generated_violations(vocab, &g);
            violations += v;
            positions += n;
        }
    }
    Ok(ViolationStats {
        rate: if positions == 0 { 0.0 } else { violations as f64 / positions as f64 },
        violations,
        positions,
        samples: prompts.len() * n_samples,
    })
}

/// Number of prompt frames for `seconds` of audio.
pub fn prompt_frames(seconds: f64, frame_rate_hz: f64) -> usize {
    // small guard so 3 s at 12.5 Hz is 37 even with inexact products
    (seconds * frame_rate_hz + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationStats {
    pub prompt_frames: usize,
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub continuation_frames: usize,
    pub dropped_partial_tokens: usize,
    pub stopped: bool,
    pub order_violations: usize,
}

#[derive(Debug, Clone)]
pub struct Continuation {
    pub prompt_grid: TokenGrid,
    pub grid: TokenGrid,
    pub frames: Option<FeatureFrameSeq>,
    pub generation: Generation,
    pub stats: ContinuationStats,
}

/// Encodes the first `seconds` of `prompt`, generates, and decodes the
/// completed continuation frames. A trailing partial frame is dropped.
pub fn continue_audio(
    params: &LmParams<f32>,
    codec: &RvqCodec,
    vocab: &UnifiedVocab,
    prompt: &FeatureFrameSeq,
    seconds: f64,
    config: &SampleConfig,
) -> Result<Continuation> {
    let n = prompt_frames(seconds, prompt.frame_rate_hz);
    if n == 0 || prompt.len() < n {
        return Err(Error::range(
            "prompt",
            format!("{} frames, {seconds} s needs {n}", prompt.len()),
        ));
    }
    if codec.levels() != vocab.q() {
        return Err(Error::Dimension {
            what: "codec levels vs vocabulary Q".into(),
            expected: vocab.q(),
            got: codec.levels(),
        });
    }
    let prompt_grid = codec.encode(&prompt.slice(0, n))?;
    let prompt_ids = interleave_open(vocab, &prompt_grid)?;
    let generation = generate(params, vocab, &prompt_ids, config)?;
    let (order_violations, _) = generated_violations(vocab, &generation);
    let q = vocab.q();
    let mut body: Vec<TokenId> = generation.new_ids().to_vec();
    if generation.stopped {
        body.pop();
    }
    let whole = body.len() / q;
    let dropped = body.len() - whole * q;
    let mut grid = TokenGrid::zeros(q, whole);
    for (i, &id) in body[..whole * q].iter().enumerate() {
        // unconstrained output may put a code at the wrong level; it lands
        // in the slot of its position and keeps its code
        let code = match vocab.kind(id) {
            TokenKind::Audio { code, .. } => code,
            _ => 0,
        };
        grid.set(i % q, i / q, code);
    }
    let frames = if whole > 0 {
        Some(codec.decode(&grid, prompt.frame_rate_hz)?)
    } else {
        None
    };
    Ok(Continuation {
        stats: ContinuationStats {
            prompt_frames: n,
            prompt_tokens: prompt_ids.len(),
            generated_tokens: generation.new_ids().len(),
            continuation_frames: whole,
            dropped_partial_tokens: dropped,
            stopped: generation.stopped,
            order_violations,
        },
        prompt_grid,
        grid,
        frames,
        generation,
    })
}
