//! Paired-likelihood evaluation and the oracle speaker probe.

mod pairs;
mod probe;

pub use pairs::{EvalPair, PairBuilder, Task};
pub use probe::{cosine, recover_speaker, speaker_similarity};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{score, LmParams, ScoreMask};
use crate::tokens::UnifiedVocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    All,
    SemanticOnly,
}

impl MaskKind {
    /// Consistency tasks use every token, semantic tasks only level-1 codes.
    pub fn for_task(task: Task) -> MaskKind {
        if task.is_consistency() {
            MaskKind::All
        } else {
            MaskKind::SemanticOnly
        }
    }
}

/// Accuracy from `(pos_score, neg_score)` pairs: wins count 1, ties 0.5.
pub fn accuracy_from_scores(scores: &[(f64, f64)]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("no pairs to score".into()));
    }
    let credit: f64 = scores
        .iter()
        .map(|&(p, n)| {
            if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(credit / scores.len() as f64)
}

/// Accuracy from margins `pos − neg`.
pub fn accuracy_from_margins(margins: &[f64]) -> Result<f64> {
    accuracy_from_scores(&margins.iter().map(|&m| (m, 0.0)).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResult {
    pub accuracy: f64,
    pub wins: usize,
    pub ties: usize,
    pub margins: Vec<f64>,
}

impl MaskResult {
    fn from_margins(margins: Vec<f64>) -> Result<Self> {
        Ok(MaskResult {
            accuracy: accuracy_from_margins(&margins)?,
            wins: margins.iter().filter(|&&m| m > 0.0).count(),
            ties: margins.iter().filter(|&&m| m == 0.0).count(),
            margins,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: Task,
    pub n: usize,
    /// Masking the task is reported under by default.
    pub primary: MaskKind,
    pub accuracy: f64,
    pub all: MaskResult,
    pub semantic_only: MaskResult,
}

impl TaskResult {
    pub fn under(&self, mask: MaskKind) -> &MaskResult {
        match mask {
            MaskKind::All => &self.all,
            MaskKind::SemanticOnly => &self.semantic_only,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskResult> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

/// Per-pair totals under both maskings, restricted to targets from
/// `score_from` on.
fn pair_totals(p: &LmParams<f32>, vocab: &UnifiedVocab, ids: &[u32], from: usize) -> Result<(f64, f64)> {
    let s = score(p, ids, &ScoreMask::All, Some(vocab))?;
    let mut all = 0.0;
    let mut sem = 0.0;
    for (t, &lp) in s.per_token.iter().enumerate().skip(from) {
        all += lp;
        if vocab.is_semantic(ids[t + 1]) {
            sem += lp;
        }
    }
    Ok((all, sem))
}

/// Scores every pair of one task under both maskings. `primary` selects the
/// headline accuracy; `None` applies the per-task default.
pub fn paired_accuracy(
    params: &LmParams<f32>,
    vocab: &UnifiedVocab,
    pairs: &[EvalPair],
    primary: Option<MaskKind>,
) -> Result<TaskResult> {
    let first = pairs.first().ok_or_else(|| Error::Empty("no pairs to score".into()))?;
    let task = first.task;
    let mut m_all = Vec::with_capacity(pairs.len());
    let mut m_sem = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.task != task {
            return Err(Error::config("pairs", "mixed tasks in one scoring call"));
        }
        let (pa, ps) = pair_totals(params, vocab, &pair.pos, pair.score_from)?;
        let (na, ns) = pair_totals(params, vocab, &pair.neg, pair.score_from)?;
        m_all.push(pa - na);
        m_sem.push(ps - ns);
    }
    let all = MaskResult::from_margins(m_all)?;
    let semantic_only = MaskResult::from_margins(m_sem)?;
    let primary = primary.unwrap_or(MaskKind::for_task(task));
    let accuracy = match primary {
        MaskKind::All => all.accuracy,
        MaskKind::SemanticOnly => semantic_only.accuracy,
    };
    Ok(TaskResult {
        task,
        n: pairs.len(),
        primary,
        accuracy,
        all,
        semantic_only,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng as _;

    #[test]
    fn one_win_one_loss() {
        assert_eq!(accuracy_from_scores(&[(-1.0, -2.0), (-3.0, -1.0)]).unwrap(), 0.5);
        assert_eq!(accuracy_from_scores(&[(-1.0, -1.0)]).unwrap(), 0.5);
        assert!(accuracy_from_scores(&[]).is_err());
    }

    #[test]
    fn random_scorer_is_near_chance() {
        let mut rng = rng_for(11, &[]);
        let scores: Vec<(f64, f64)> = (0..4000).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let acc = accuracy_from_scores(&scores).unwrap();
        // 4 sigma of a binomial(4000, 0.5) proportion
        assert!((acc - 0.5).abs() < 4.0 * (0.25f64 / 4000.0).sqrt(), "{acc}");
    }

    #[test]
    fn default_masks_follow_task_family() {
        assert_eq!(MaskKind::for_task(Task::Room), MaskKind::All);
        assert_eq!(MaskKind::for_task(Task::Syntax), MaskKind::SemanticOnly);
        assert_eq!(Task::parse("topic").unwrap(), Task::Topic);
        assert!(Task::parse("nope").is_err());
    }
}
