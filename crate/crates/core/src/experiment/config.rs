use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::sha256_hex;
use crate::codec::CodecConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::eval::{MaskKind, Task};
use crate::model::LmConfig;
use crate::sample::SampleConfig;
use crate::tokens::UnifiedVocab;
use crate::train::TrainConfig;

/// Architecture fields of the language model; the vocabulary size and seed
/// are filled in per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = LmConfig::default();
        ModelSection {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_seq_len: c.max_seq_len,
            rope_theta: c.rope_theta,
            norm_eps: c.norm_eps,
            init_std: c.init_std,
        }
    }
}

impl ModelSection {
    pub fn lm_config(&self, vocab_size: usize, seed: u64) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            rope_theta: self.rope_theta,
            norm_eps: self.norm_eps,
            init_std: self.init_std,
            seed,
            extended_from: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Task names, or `["all"]`.
    pub tasks: Vec<String>,
    pub pairs_per_task: usize,
    pub pair_seed: u64,
    /// Held-out utterances used as generation prompts.
    pub prompts: usize,
    pub samples_per_prompt: usize,
    pub prompt_seconds: f64,
    /// Continuations shorter than this are left out of speaker similarity.
    pub min_continuation_frames: usize,
    /// Headline masking: `per-task` (full sequence for consistency tasks,
    /// semantic tokens otherwise), `all` or `semantic-only`.
    pub mask: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tasks: vec!["all".into()],
            pairs_per_task: 200,
            pair_seed: 1234,
            prompts: 20,
            samples_per_prompt: 5,
            prompt_seconds: 3.0,
            min_continuation_frames: 4,
            mask: "per-task".into(),
        }
    }
}

impl EvalSection {
    pub fn task_list(&self) -> Result<Vec<Task>> {
        if self.tasks.iter().any(|t| t == "all") {
            return Ok(Task::ALL.to_vec());
        }
        self.tasks.iter().map(|t| Task::parse(t)).collect()
    }

    /// `None` applies each task's default masking.
    pub fn mask_kind(&self) -> Result<Option<MaskKind>> {
        match self.mask.as_str() {
            "per-task" => Ok(None),
            "all" => Ok(Some(MaskKind::All)),
            "semantic-only" => Ok(Some(MaskKind::SemanticOnly)),
            other => Err(Error::config(
                "mask",
                format!("`{other}` is not one of per-task, all, semantic-only"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub quantizers: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            quantizers: vec![2, 4, 8],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSection {
    /// Chat-completion URL; the judge is skipped when unset.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub max_retries: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seeds of the repeated language-model runs.
    pub run_seeds: Vec<u64>,
    pub corpus: CorpusConfig,
    pub codec: CodecConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub text_train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub judge: JudgeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            run_seeds: vec![0, 1, 2],
            corpus: CorpusConfig::default(),
            codec: CodecConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            text_train: TrainConfig {
                batch_size: 32,
                steps: 1000,
                warmup_steps: 50,
                ..TrainConfig::default()
            },
            sample: SampleConfig::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
            judge: JudgeSection::default(),
        }
    }
}

fn nested(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::config(format!("{section}.{field}"), reason),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c = Self::from_toml(&text).map_err(|e| match e {
            Error::Config { reason, .. } => Error::format(path, reason),
            other => other,
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of the canonical JSON echo of the config.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn text_size(&self) -> u32 {
        self.corpus.lexicon_size as u32
    }

    pub fn vocab(&self, levels: usize) -> Result<UnifiedVocab> {
        UnifiedVocab::new(self.text_size(), levels as u32, self.codec.codebook_size as u32)
    }

    /// Checks that a model over `levels` quantizers fits the longest
    /// utterance.
    pub fn validate_quantizers(&self, levels: &[usize]) -> Result<()> {
        for &q in levels {
            if q == 0 {
                return Err(Error::config("codec.levels", "must be >= 1"));
            }
            let vocab = self.vocab(q).map_err(|e| nested("codec", e))?;
            self.model
                .lm_config(vocab.total_size() as usize, 0)
                .validate()
                .map_err(|e| nested("model", e))?;
            let need = q * self.corpus.max_frames + 2;
            if self.model.max_seq_len < need {
                return Err(Error::config(
                    "model.max_seq_len",
                    format!(
                        "{} is below Q·corpus.max_frames + 2 = {q}·{} + 2 = {need}",
                        self.model.max_seq_len, self.corpus.max_frames
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate().map_err(|e| nested("corpus", e))?;
        self.codec.validate().map_err(|e| nested("codec", e))?;
        self.train.validate().map_err(|e| nested("train", e))?;
        self.text_train.validate().map_err(|e| nested("text_train", e))?;
        if self.run_seeds.is_empty() {
            return Err(Error::config("run_seeds", "need at least one seed"));
        }
        self.validate_quantizers(&[self.codec.levels])?;
        if self.ablation.quantizers.is_empty() || self.ablation.seeds.is_empty() {
            return Err(Error::config("ablation", "quantizers and seeds must be nonempty"));
        }
        self.sample
            .validate(self.vocab(self.codec.levels)?.total_size() as usize)
            .map_err(|e| nested("sample", e))?;
        self.eval.task_list().map_err(|e| nested("eval", e))?;
        self.eval.mask_kind().map_err(|e| nested("eval", e))?;
        if self.eval.prompt_seconds <= 0.0 {
            return Err(Error::config("eval.prompt_seconds", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn short_context_names_both_fields() {
        let mut c = ExperimentConfig::default();
        c.model.max_seq_len = 500;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("model.max_seq_len") && msg.contains("corpus.max_frames"), "{msg}");
    }

    #[test]
    fn default_ablation_needs_longer_context() {
        // Q = 8 at the full 250-frame cap needs 2002 positions
        let c = ExperimentConfig::default();
        assert!(c.validate_quantizers(&[2, 4]).is_ok());
        assert!(c.validate_quantizers(&[8]).is_err());
    }

    #[test]
    fn nested_field_paths() {
        let mut c = ExperimentConfig::default();
        c.train.batch_size = 0;
        assert!(c.validate().unwrap_err().to_string().contains("train.batch_size"));
        assert!(ExperimentConfig::from_toml("[corpus]\nbogus = 1\n").is_err());
    }
}
