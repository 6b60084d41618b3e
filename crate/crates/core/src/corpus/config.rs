use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the synthetic speech world.
///
/// Frames are `dim`-dimensional. The first `semantic_dim` coordinates carry
/// phoneme identity; every acoustic factor lives in the remaining
/// coordinates, so acoustic edits never move the semantic projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_phonemes: usize,
    pub dim: usize,
    pub semantic_dim: usize,
    pub lexicon_size: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
    /// Onset/medial/coda phoneme classes; makes word boundaries recoverable
    /// from the phoneme string alone.
    pub phonotactics: bool,
    pub n_speakers: usize,
    pub n_backgrounds: usize,
    pub n_topics: usize,
    pub frame_rate_hz: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub phone_frames_min: usize,
    pub phone_frames_max: usize,
    /// Upper bound on sentences per utterance (0 = derive from `max_frames`).
    pub max_sentences: usize,
    pub n_utterances: usize,
    pub heldout_fraction: f64,
    pub speaker_scale: f64,
    pub sentiment_scale: f64,
    pub background_scale: f64,
    pub frame_noise: f64,
    pub sentiment_levels: Vec<f64>,
    pub room_coeffs: Vec<f64>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            n_phonemes: 20,
            dim: 16,
            semantic_dim: 8,
            lexicon_size: 256,
            word_len_min: 2,
            word_len_max: 4,
            phonotactics: true,
            n_speakers: 64,
            n_backgrounds: 8,
            n_topics: 4,
            frame_rate_hz: 12.5,
            min_frames: 12,
            max_frames: 250,
            phone_frames_min: 2,
            phone_frames_max: 4,
            max_sentences: 0,
            n_utterances: 1000,
            heldout_fraction: 0.1,
            speaker_scale: 1.0,
            sentiment_scale: 0.5,
            background_scale: 0.4,
            frame_noise: 0.05,
            sentiment_levels: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            room_coeffs: vec![0.0, 0.5],
        }
    }
}

impl CorpusConfig {
    pub fn acoustic_dim(&self) -> usize {
        self.dim - self.semantic_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_phonemes", self.n_phonemes),
            ("dim", self.dim),
            ("semantic_dim", self.semantic_dim),
            ("lexicon_size", self.lexicon_size),
            ("word_len_min", self.word_len_min),
            ("n_speakers", self.n_speakers),
            ("n_backgrounds", self.n_backgrounds),
            ("n_topics", self.n_topics),
            ("min_frames", self.min_frames),
            ("phone_frames_min", self.phone_frames_min),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.n_phonemes > 255 {
            return Err(Error::config("n_phonemes", "must be <= 255"));
        }
        if self.semantic_dim >= self.dim {
            return Err(Error::config(
                "semantic_dim",
                "must leave at least one acoustic dimension (semantic_dim < dim)",
            ));
        }
        if self.acoustic_dim() < 2 {
            return Err(Error::config("dim", "needs >= 2 acoustic dimensions"));
        }
        if self.word_len_max < self.word_len_min {
            return Err(Error::config("word_len_max", "must be >= word_len_min"));
        }
        if self.phonotactics && self.word_len_min < 2 {
            return Err(Error::config(
                "word_len_min",
                "phonotactic words need an onset and a coda (>= 2)",
            ));
        }
        if self.phone_frames_max < self.phone_frames_min || self.phone_frames_max > 255 {
            return Err(Error::config(
                "phone_frames_max",
                "must be >= phone_frames_min and <= 255",
            ));
        }
        if self.max_frames < self.min_frames {
            return Err(Error::config("max_frames", "must be >= min_frames"));
        }
        if self.max_frames < self.word_len_max * self.phone_frames_max {
            return Err(Error::config(
                "max_frames",
                "must fit at least one word of maximal length",
            ));
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(Error::config("frame_rate_hz", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::config("heldout_fraction", "must be in [0, 1)"));
        }
        for (field, v) in [
            ("speaker_scale", self.speaker_scale),
            ("sentiment_scale", self.sentiment_scale),
            ("background_scale", self.background_scale),
            ("frame_noise", self.frame_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        if self.sentiment_levels.is_empty()
            || self.sentiment_levels.iter().any(|s| !(-1.0..=1.0).contains(s))
        {
            return Err(Error::config(
                "sentiment_levels",
                "must be a nonempty set of values in [-1, 1]",
            ));
        }
        if self.room_coeffs.is_empty() || self.room_coeffs.iter().any(|c| !(0.0..1.0).contains(c)) {
            return Err(Error::config(
                "room_coeffs",
                "must be a nonempty set of values in [0, 1)",
            ));
        }
        Ok(())
    }

    /// A copy with every acoustic factor switched off.
    pub fn noiseless(&self) -> Self {
        CorpusConfig {
            speaker_scale: 0.0,
            sentiment_scale: 0.0,
            background_scale: 0.0,
            frame_noise: 0.0,
            room_coeffs: vec![0.0],
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        CorpusConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_fields() {
        let bad = CorpusConfig {
            semantic_dim: 16,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CorpusConfig {
            room_coeffs: vec![1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CorpusConfig {
            speaker_scale: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
