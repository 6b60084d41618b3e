//! Decoder-only Transformer over the unified vocabulary: RMS norm, rotary
//! positions, gated MLP, untied output head.

mod checkpoint;
mod decode;
mod params;
mod transformer;

pub use checkpoint::{LmCheckpoint, OptimizerState, CHECKPOINT_VERSION};
pub use decode::KvDecoder;
pub use params::{extend_vocab, init_model, LayerOffsets, LmConfig, LmParams, ParamLayout, Tensor};
pub use transformer::{backward, forward, log_prob_at, loss_and_grads, ForwardPass};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Float;
use crate::tokens::UnifiedVocab;

/// Which target positions a score or loss covers. Flags refer to the target
/// token, so flag `i` selects the prediction of `ids[i + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMask {
    All,
    /// Targets that are level-1 (semantic) audio tokens.
    SemanticOnly,
    Custom(Vec<bool>),
}

impl ScoreMask {
    pub fn flags(&self, vocab: Option<&UnifiedVocab>, ids: &[u32]) -> Result<Vec<bool>> {
        let n = ids.len().saturating_sub(1);
        match self {
            ScoreMask::All => Ok(vec![true; n]),
            ScoreMask::SemanticOnly => {
                let vocab = vocab.ok_or_else(|| Error::Model("semantic_only scoring needs an audio vocabulary".into()))?;
                Ok(ids.iter().skip(1).map(|&t| vocab.is_semantic(t)).collect())
            }
            ScoreMask::Custom(f) => {
                if f.len() != n {
                    return Err(Error::Model(format!("custom mask has {} flags for {n} targets", f.len())));
                }
                Ok(f.clone())
            }
        }
    }

    /// Flags of the complement of `self`.
    pub fn complement(&self, vocab: Option<&UnifiedVocab>, ids: &[u32]) -> Result<ScoreMask> {
        Ok(ScoreMask::Custom(self.flags(vocab, ids)?.into_iter().map(|b| !b).collect()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    /// Sum of included target log-probabilities (natural log).
    pub total: f64,
    pub included: usize,
    /// `log p(ids[i+1] | ids[..=i])` for every target, included or not.
    pub per_token: Vec<f64>,
    pub flags: Vec<bool>,
}

impl Score {
    pub fn mean(&self) -> Option<f64> {
        (self.included > 0).then(|| self.total / self.included as f64)
    }

    pub fn perplexity(&self) -> Option<f64> {
        self.mean().map(|m| (-m).exp())
    }
}

/// Logits for every position of one sequence (`len × vocab`).
pub fn logits<T: Float>(p: &LmParams<T>, ids: &[u32]) -> Result<Vec<T>> {
    Ok(forward(p, &[ids])?.logits)
}

/// Exact log-likelihood of the included targets of `ids`.
pub fn score<T: Float>(p: &LmParams<T>, ids: &[u32], mask: &ScoreMask, vocab: Option<&UnifiedVocab>) -> Result<Score> {
    if ids.len() < 2 {
        return Err(Error::Model("scoring needs at least 2 tokens".into()));
    }
    let flags = mask.flags(vocab, ids)?;
    let fp = forward(p, &[&ids[..ids.len() - 1]])?;
    let v = p.config.vocab_size;
    let per_token: Vec<f64> = (0..ids.len() - 1)
        .map(|t| log_prob_at(&fp.logits[t * v..(t + 1) * v], ids[t + 1] as usize))
        .collect();
    let total = per_token.iter().zip(&flags).filter(|(_, &f)| f).map(|(&l, _)| l).sum();
    let included = flags.iter().filter(|&&f| f).count();
    Ok(Score {
        total,
        included,
        per_token,
        flags,
    })
}

/// Mean loss over a batch with the given masks, without gradients.
pub fn batch_loss<T: Float>(p: &LmParams<T>, seqs: &[&[u32]], include: &[Vec<bool>]) -> Result<(f64, usize)> {
    let inputs: Vec<&[u32]> = seqs.iter().map(|s| &s[..s.len().saturating_sub(1)]).collect();
    let fp = forward(p, &inputs)?;
    let v = p.config.vocab_size;
    let mut total = 0.0;
    let mut count = 0;
    for (si, &(off, len)) in fp.spans().iter().enumerate() {
        for t in 0..len {
            if include[si][t] {
                total -= log_prob_at(&fp.logits[(off + t) * v..(off + t + 1) * v], seqs[si][t + 1] as usize);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Model("mask excludes every position".into()));
    }
    Ok((total / count as f64, count))
}
