use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::RvqCodec;
use crate::corpus::{
    generate_utterance, make_consistency_negative, render_phoneme_string, AcousticFactors, Axis, Language, PhonemeId,
    WordId, WordRole,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, Rng, TAG_PAIRS};
use crate::tokens::{interleave, TokenId, UnifiedVocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Speaker,
    Sentiment,
    Background,
    Room,
    Lexical,
    Syntax,
    Topic,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Speaker,
        Task::Sentiment,
        Task::Background,
        Task::Room,
        Task::Lexical,
        Task::Syntax,
        Task::Topic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Speaker => "speaker",
            Task::Sentiment => "sentiment",
            Task::Background => "background",
            Task::Room => "room",
            Task::Lexical => "lexical",
            Task::Syntax => "syntax",
            Task::Topic => "topic",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("tasks", format!("unknown task `{s}`")))
    }

    /// The acoustic axis switched by a consistency task.
    pub fn axis(self) -> Option<Axis> {
        match self {
            Task::Speaker => Some(Axis::Speaker),
            Task::Sentiment => Some(Axis::Sentiment),
            Task::Background => Some(Axis::Background),
            Task::Room => Some(Axis::Room),
            _ => None,
        }
    }

    pub fn is_consistency(self) -> bool {
        self.axis().is_some()
    }

    fn code(self) -> u64 {
        Task::ALL.iter().position(|&t| t == self).unwrap() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub task: Task,
    pub pos: Vec<TokenId>,
    pub neg: Vec<TokenId>,
    /// Source utterance or rendering seed.
    pub source: String,
    pub switch_frame: Option<usize>,
    /// Targets before this index are conditioning only (topic prompts).
    pub score_from: usize,
}

/// Everything needed to render and tokenize evaluation material.
pub struct PairBuilder<'a> {
    pub lang: &'a Language,
    pub codec: &'a RvqCodec,
    pub vocab: UnifiedVocab,
    /// Corpus indices of the utterances consistency pairs are built from.
    pub sources: Vec<usize>,
    pub seed: u64,
}

impl PairBuilder<'_> {
    fn tokens(&self, frames: &crate::corpus::FeatureFrameSeq) -> Result<Vec<TokenId>> {
        interleave(&self.vocab, &self.codec.encode(frames)?)
    }

    fn random_factors(&self, rng: &mut Rng) -> AcousticFactors {
        let c = &self.lang.config;
        AcousticFactors {
            speaker_id: rng.random_range(0..self.lang.speakers.len()),
            sentiment: *c.sentiment_levels.choose(rng).unwrap(),
            background_id: rng.random_range(0..self.lang.backgrounds.len()),
            room_coeff: *c.room_coeffs.choose(rng).unwrap(),
        }
    }

    pub fn build(&self, task: Task, n: usize) -> Result<Vec<EvalPair>> {
        match task.axis() {
            Some(axis) => self.consistency(task, axis, n),
            None => (0..n).map(|i| self.semantic(task, i)).collect(),
        }
    }

    fn consistency(&self, task: Task, axis: Axis, n: usize) -> Result<Vec<EvalPair>> {
        let alts = match axis {
            Axis::Speaker => self.lang.speakers.len(),
            Axis::Background => self.lang.backgrounds.len(),
            Axis::Sentiment => self.lang.config.sentiment_levels.len(),
            Axis::Room => self.lang.config.room_coeffs.len(),
        }
        .saturating_sub(1);
        let available = self.sources.len() * alts;
        if n > available {
            return Err(Error::Capacity {
                what: format!("distinct {} switch pairs (sources x alternative values)", axis.name()),
                requested: n,
                available,
            });
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let index = self.sources[i % self.sources.len()];
            let utt = generate_utterance(self.lang, index)?;
            let len = utt.duration_frames();
            if len < 2 {
                return Err(Error::Capacity {
                    what: format!("utterance {} frames for a switch", utt.id),
                    requested: 2,
                    available: len,
                });
            }
            let pair_seed = derive_seed(self.seed, &[TAG_PAIRS, task.code(), i as u64]);
            let mut rng = rng_for(pair_seed, &[]);
            let lo = (len / 4).max(1);
            let hi = (3 * len / 4).max(lo + 1).min(len);
            let switch = rng.random_range(lo..hi);
            let neg = make_consistency_negative(self.lang, &utt, axis, switch, pair_seed)?;
            out.push(EvalPair {
                task,
                pos: self.tokens(&utt.frames)?,
                neg: self.tokens(&neg.frames)?,
                source: utt.id.clone(),
                switch_frame: Some(switch),
                score_from: 0,
            });
        }
        Ok(out)
    }

    fn semantic(&self, task: Task, i: usize) -> Result<EvalPair> {
        let pair_seed = derive_seed(self.seed, &[TAG_PAIRS, task.code(), i as u64]);
        let mut rng = rng_for(pair_seed, &[]);
        let lang = self.lang;
        let max_frames = lang.config.max_frames;
        for _attempt in 0..200 {
            let factors = self.random_factors(&mut rng);
            let topic = rng.random_range(0..lang.n_topics);
            let render_seed: u64 = rng.random();
            let (pos_ph, neg_ph, prompt_len) = match task {
                Task::Lexical => {
                    let sentence = lang.sample_sentence(&mut rng, topic);
                    let slots: Vec<usize> = (0..sentence.len())
                        .filter(|&k| !matches!(lang.words[sentence[k] as usize].role, WordRole::Determiner))
                        .collect();
                    let slot = *slots.choose(&mut rng).unwrap();
                    let target: WordId = sentence[slot];
                    let len = lang.words[target as usize].phonemes.len();
                    let Some(pseudo) = lang.sample_pseudo_word(&mut rng, len, Some(target)) else {
                        continue;
                    };
                    let pos = lang.phonemes_of(&sentence)?;
                    let mut neg = Vec::with_capacity(pos.len());
                    for (k, &w) in sentence.iter().enumerate() {
                        if k == slot {
                            neg.extend_from_slice(&pseudo);
                        } else {
                            neg.extend_from_slice(&lang.words[w as usize].phonemes);
                        }
                    }
                    (pos, neg, None)
                }
                Task::Syntax => {
                    let sentence = lang.sample_sentence(&mut rng, topic);
                    let Some(bad) = lang.agreement_violation(&sentence) else {
                        continue;
                    };
                    (lang.phonemes_of(&sentence)?, lang.phonemes_of(&bad)?, None)
                }
                Task::Topic => {
                    let Some((prompt, coherent, incoherent)) = lang.sample_topic_pair(&mut rng) else {
                        return Err(Error::Capacity {
                            what: "topics".into(),
                            requested: 2,
                            available: lang.n_topics,
                        });
                    };
                    let (c, n) = (lang.phonemes_of(&coherent)?, lang.phonemes_of(&incoherent)?);
                    // summed likelihoods are only comparable at equal length
                    if c.len() != n.len() {
                        continue;
                    }
                    let p = lang.phonemes_of(&prompt)?;
                    let mut pos = p.clone();
                    pos.extend(c);
                    let mut neg = p.clone();
                    neg.extend(n);
                    (pos, neg, Some(p.len()))
                }
                _ => unreachable!("consistency tasks are built from the corpus"),
            };
            let frames_of = |ph: &[PhonemeId]| -> usize {
                crate::corpus::draw_durations(lang, ph.len(), render_seed).iter().map(|&d| d as usize).sum()
            };
            if frames_of(&pos_ph).max(frames_of(&neg_ph)) > max_frames {
                continue;
            }
            let pos_frames = render_phoneme_string(lang, &pos_ph, factors, render_seed)?;
            let neg_frames = render_phoneme_string(lang, &neg_ph, factors, render_seed)?;
            let score_from = match prompt_len {
                // `<audio>` plus the prompt frames; durations depend only on
                // position, so both sides share the prompt frames
                Some(np) => {
                    let durations = crate::corpus::draw_durations(lang, np, render_seed);
                    let frames: usize = durations.iter().map(|&d| d as usize).sum();
                    // first scored target is the first continuation token
                    frames * self.vocab.q()
                }
                None => 0,
            };
            return Ok(EvalPair {
                task,
                pos: self.tokens(&pos_frames)?,
                neg: self.tokens(&neg_frames)?,
                source: format!("r{render_seed:016x}"),
                switch_frame: None,
                score_from,
            });
        }
        Err(Error::Capacity {
            what: format!("{} pairs within {max_frames} frames", task.name()),
            requested: i + 1,
            available: i,
        })
    }
}
