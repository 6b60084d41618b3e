//! Frame-level rendering of phoneme strings under acoustic factors.
//!
//! Before smoothing, frame `t` is
//! `base(phoneme_t) + speaker_scale·speaker + sentiment_scale·sentiment·prosody
//!  + background_scale·bg(t) + frame_noise·ε_t`; the room factor then applies
//! `y_t = (1 - c)·x_t + c·y_{t-1}`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::language::{Language, PhonemeId, WordId};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, TAG_NEGATIVE};

/// Continuous `T′ × D` frame matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrameSeq {
    pub data: Vec<f32>,
    pub dim: usize,
    pub frame_rate_hz: f64,
}

impl FeatureFrameSeq {
    pub fn new(data: Vec<f32>, dim: usize, frame_rate_hz: f64) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension {
                what: "frame data length".into(),
                expected: dim,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::range("frame values", "non-finite entry"));
        }
        Ok(FeatureFrameSeq {
            data,
            dim,
            frame_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        FeatureFrameSeq {
            data: self.data[start * self.dim..end * self.dim].to_vec(),
            dim: self.dim,
            frame_rate_hz: self.frame_rate_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Speaker,
    Sentiment,
    Background,
    Room,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Speaker, Axis::Sentiment, Axis::Background, Axis::Room];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Speaker => "speaker",
            Axis::Sentiment => "sentiment",
            Axis::Background => "background",
            Axis::Room => "room",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcousticFactors {
    pub speaker_id: usize,
    pub sentiment: f64,
    pub background_id: usize,
    pub room_coeff: f64,
}

impl AcousticFactors {
    fn validate(&self, lang: &Language) -> Result<()> {
        if self.speaker_id >= lang.speakers.len() {
            return Err(Error::range(
                "speaker_id",
                format!("{} >= {}", self.speaker_id, lang.speakers.len()),
            ));
        }
        if self.background_id >= lang.backgrounds.len() {
            return Err(Error::range(
                "background_id",
                format!("{} >= {}", self.background_id, lang.backgrounds.len()),
            ));
        }
        if !(-1.0..=1.0).contains(&self.sentiment) {
            return Err(Error::range("sentiment", format!("{} not in [-1, 1]", self.sentiment)));
        }
        if !(0.0..1.0).contains(&self.room_coeff) {
            return Err(Error::range("room_coeff", format!("{} not in [0, 1)", self.room_coeff)));
        }
        Ok(())
    }
}

/// From frame `at_frame` onward the utterance is rendered with `factors`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorSwitch {
    pub axis: Axis,
    pub at_frame: usize,
    pub factors: AcousticFactors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<WordId>,
    pub phonemes: Vec<PhonemeId>,
    /// Frames per phoneme.
    pub durations: Vec<u8>,
    pub factors: AcousticFactors,
    pub speaker_vec: Vec<f64>,
    pub switch: Option<FactorSwitch>,
    /// Seed of the duration and noise streams.
    pub seed: u64,
    pub frames: FeatureFrameSeq,
}

impl Utterance {
    pub fn duration_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn factors_at(&self, t: usize) -> AcousticFactors {
        match self.switch {
            Some(sw) if t >= sw.at_frame => sw.factors,
            _ => self.factors,
        }
    }

    /// Speaker vector in effect at frame `t`.
    pub fn speaker_vec_at<'a>(&'a self, lang: &'a Language, t: usize) -> &'a [f64] {
        &lang.speakers[self.factors_at(t).speaker_id]
    }

    /// Phoneme id of every frame.
    pub fn frame_phonemes(&self) -> Vec<PhonemeId> {
        expand(&self.phonemes, &self.durations)
    }
}

fn expand(phonemes: &[PhonemeId], durations: &[u8]) -> Vec<PhonemeId> {
    phonemes
        .iter()
        .zip(durations)
        .flat_map(|(&p, &d)| std::iter::repeat_n(p, d as usize))
        .collect()
}

/// Draws one duration per phoneme from the utterance seed. Durations depend
/// only on the phoneme position, so equal-length strings share them.
pub fn draw_durations(lang: &Language, n: usize, seed: u64) -> Vec<u8> {
    let c = &lang.config;
    let mut rng = rng_for(seed, &[0xd0]);
    (0..n)
        .map(|_| rng.random_range(c.phone_frames_min..=c.phone_frames_max) as u8)
        .collect()
}

/// Renders frames for a phoneme/duration sequence under a (possibly switched)
/// factor schedule. `time_offset` shifts background phase and noise draws.
pub fn render_frames(
    lang: &Language,
    phonemes: &[PhonemeId],
    durations: &[u8],
    factors: &AcousticFactors,
    switch: Option<&FactorSwitch>,
    seed: u64,
) -> Result<FeatureFrameSeq> {
    let c = &lang.config;
    let d = c.dim;
    let sd = c.semantic_dim;
    let per_frame = expand(phonemes, durations);
    let mut noise_rng = rng_for(seed, &[0x0e]);
    let mut out = Vec::with_capacity(per_frame.len() * d);
    let mut prev: Option<Vec<f64>> = None;
    for (t, &ph) in per_frame.iter().enumerate() {
        let f = match switch {
            Some(sw) if t >= sw.at_frame => &sw.factors,
            _ => factors,
        };
        let base = &lang
            .phonemes
            .get(ph as usize)
            .ok_or_else(|| Error::range("phoneme", format!("{ph}")))?
            .base;
        let spk = &lang.speakers[f.speaker_id];
        let bg = &lang.backgrounds[f.background_id];
        let amp = bg.amplitude(t);
        let mut x = vec![0.0f64; d];
        for i in 0..d {
            x[i] = base[i]
                + c.speaker_scale * spk[i]
                + c.sentiment_scale * f.sentiment * lang.prosody_basis[i]
                + c.background_scale * amp * bg.direction[i];
        }
        // noise is drawn for every frame so the stream is factor independent
        for xi in x.iter_mut().skip(sd) {
            let e: f64 = StandardNormal.sample(&mut noise_rng);
            *xi += c.frame_noise * e;
        }
        if let Some(p) = &prev {
            let coeff = f.room_coeff;
            for i in 0..d {
                x[i] = (1.0 - coeff) * x[i] + coeff * p[i];
            }
        }
        out.extend(x.iter().map(|&v| v as f32));
        prev = Some(x);
    }
    FeatureFrameSeq::new(out, d, c.frame_rate_hz)
}

/// Renders a word sequence. Durations and noise come from `seed`.
pub fn render_utterance(
    lang: &Language,
    words: &[WordId],
    factors: AcousticFactors,
    seed: u64,
) -> Result<Utterance> {
    factors.validate(lang)?;
    let phonemes = lang.phonemes_of(words)?;
    if phonemes.is_empty() {
        return Err(Error::Empty("utterance has no phonemes".into()));
    }
    let durations = draw_durations(lang, phonemes.len(), seed);
    let frames = render_frames(lang, &phonemes, &durations, &factors, None, seed)?;
    Ok(Utterance {
        id: format!("r{seed:016x}"),
        words: words.to_vec(),
        phonemes,
        durations,
        factors,
        speaker_vec: lang.speakers[factors.speaker_id].clone(),
        switch: None,
        seed,
        frames,
    })
}

/// Renders an arbitrary phoneme string (pseudo-words included) with the same
/// duration and noise streams as a word rendering of equal length.
pub fn render_phoneme_string(
    lang: &Language,
    phonemes: &[PhonemeId],
    factors: AcousticFactors,
    seed: u64,
) -> Result<FeatureFrameSeq> {
    factors.validate(lang)?;
    let durations = draw_durations(lang, phonemes.len(), seed);
    render_frames(lang, phonemes, &durations, &factors, None, seed)
}

/// Values the axis can take other than the current one.
pub fn alternatives(lang: &Language, factors: &AcousticFactors, axis: Axis) -> Vec<AcousticFactors> {
    let c = &lang.config;
    match axis {
        Axis::Speaker => (0..lang.speakers.len())
            .filter(|&s| s != factors.speaker_id)
            .map(|s| AcousticFactors {
                speaker_id: s,
                ..*factors
            })
            .collect(),
        Axis::Background => (0..lang.backgrounds.len())
            .filter(|&b| b != factors.background_id)
            .map(|b| AcousticFactors {
                background_id: b,
                ..*factors
            })
            .collect(),
        Axis::Sentiment => c
            .sentiment_levels
            .iter()
            .filter(|&&s| s != factors.sentiment)
            .map(|&s| AcousticFactors {
                sentiment: s,
                ..*factors
            })
            .collect(),
        Axis::Room => c
            .room_coeffs
            .iter()
            .filter(|&&r| r != factors.room_coeff)
            .map(|&r| AcousticFactors {
                room_coeff: r,
                ..*factors
            })
            .collect(),
    }
}

/// Copy of `utt` whose `axis` factor switches to a different value at
/// `switch_frame`. Phonemes, durations and noise are unchanged.
pub fn make_consistency_negative(
    lang: &Language,
    utt: &Utterance,
    axis: Axis,
    switch_frame: usize,
    seed: u64,
) -> Result<Utterance> {
    let n = utt.duration_frames();
    if switch_frame < 1 || switch_frame >= n {
        return Err(Error::range(
            "switch_frame",
            format!("{switch_frame} not in 1..{n}"),
        ));
    }
    let options = alternatives(lang, &utt.factors, axis);
    if options.is_empty() {
        return Err(Error::Capacity {
            what: format!("alternative {} values", axis.name()),
            requested: 1,
            available: 0,
        });
    }
    let mut rng = rng_for(derive_seed(seed, &[utt.seed]), &[TAG_NEGATIVE]);
    let new = options[rng.random_range(0..options.len())];
    let switch = FactorSwitch {
        axis,
        at_frame: switch_frame,
        factors: new,
    };
    let frames = render_frames(lang, &utt.phonemes, &utt.durations, &utt.factors, Some(&switch), utt.seed)?;
    Ok(Utterance {
        id: format!("{}-neg-{}", utt.id, axis.name()),
        switch: Some(switch),
        frames,
        ..utt.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_language, CorpusConfig};

    fn factors() -> AcousticFactors {
        AcousticFactors {
            speaker_id: 3,
            sentiment: 0.5,
            background_id: 1,
            room_coeff: 0.0,
        }
    }

    #[test]
    fn zero_factors_single_phoneme_repeats_base() {
        let cfg = CorpusConfig::default().noiseless();
        let lang = build_language(&cfg).unwrap();
        let frames = render_frames(&lang, &[4], &[3], &factors(), None, 9).unwrap();
        assert_eq!(frames.len(), 3);
        for f in frames.frames() {
            for (a, b) in f.iter().zip(&lang.phonemes[4].base) {
                assert_eq!(*a, *b as f32);
            }
        }
    }

    #[test]
    fn deterministic_render() {
        let lang = build_language(&CorpusConfig::default()).unwrap();
        let words = vec![lang.noun_pairs[0].0, lang.verb_pairs[0].0, lang.objects[0]];
        let a = render_utterance(&lang, &words, factors(), 77).unwrap();
        let b = render_utterance(&lang, &words, factors(), 77).unwrap();
        assert_eq!(a, b);
        let total: usize = a.durations.iter().map(|&d| d as usize).sum();
        assert_eq!(total, a.duration_frames());
        assert!(a.durations.iter().all(|&d| (2..=4).contains(&d)));
    }

    #[test]
    fn speaker_difference_is_additive_offset() {
        let cfg = CorpusConfig {
            room_coeffs: vec![0.0, 0.5],
            ..Default::default()
        };
        let lang = build_language(&cfg).unwrap();
        let words = vec![lang.noun_pairs[1].1, lang.verb_pairs[1].1, lang.objects[2]];
        for room in [0.0, 0.5] {
            let fa = AcousticFactors {
                room_coeff: room,
                ..factors()
            };
            let fb = AcousticFactors { speaker_id: 10, ..fa };
            let a = render_utterance(&lang, &words, fa, 5).unwrap();
            let b = render_utterance(&lang, &words, fb, 5).unwrap();
            let want: Vec<f64> = lang.speakers[3]
                .iter()
                .zip(&lang.speakers[10])
                .map(|(x, y)| cfg.speaker_scale * (x - y))
                .collect();
            for t in 0..a.duration_frames() {
                for i in 0..cfg.dim {
                    let got = (a.frames.frame(t)[i] - b.frames.frame(t)[i]) as f64;
                    assert!((got - want[i]).abs() < 1e-5, "t={t} i={i} room={room}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let lang = build_language(&CorpusConfig::default()).unwrap();
        assert!(render_utterance(&lang, &[9999], factors(), 1).is_err());
        let bad = AcousticFactors {
            sentiment: 1.5,
            ..factors()
        };
        assert!(render_utterance(&lang, &[0], bad, 1).is_err());
        let bad = AcousticFactors {
            room_coeff: 1.0,
            ..factors()
        };
        assert!(render_utterance(&lang, &[0], bad, 1).is_err());
    }

    #[test]
    fn speaker_negative_switches_only_after_frame() {
        let lang = build_language(&CorpusConfig::default()).unwrap();
        let words = vec![lang.noun_pairs[0].0, lang.verb_pairs[0].0, lang.objects[0]];
        let utt = render_utterance(&lang, &words, factors(), 3).unwrap();
        let s = utt.duration_frames() / 2;
        let neg = make_consistency_negative(&lang, &utt, Axis::Speaker, s, 11).unwrap();
        assert_eq!(neg.phonemes, utt.phonemes);
        assert_eq!(neg.durations, utt.durations);
        for t in 0..utt.duration_frames() {
            let same = utt.speaker_vec_at(&lang, t) == neg.speaker_vec_at(&lang, t);
            assert_eq!(same, t < s, "t={t}");
            // room 0: frames before the switch are untouched
            if t < s {
                assert_eq!(utt.frames.frame(t), neg.frames.frame(t));
            }
        }
    }

    #[test]
    fn room_negative_uses_the_only_alternative() {
        let cfg = CorpusConfig {
            room_coeffs: vec![0.0, 0.5],
            ..Default::default()
        };
        let lang = build_language(&cfg).unwrap();
        let utt = render_utterance(&lang, &[lang.noun_pairs[0].0, lang.objects[1]], factors(), 8).unwrap();
        let neg = make_consistency_negative(&lang, &utt, Axis::Room, 2, 0).unwrap();
        let sw = neg.switch.unwrap();
        assert_eq!(sw.factors.room_coeff, 0.5);
        assert_eq!(neg.factors_at(1).room_coeff, 0.0);
        assert_eq!(neg.factors_at(2).room_coeff, 0.5);
    }

    #[test]
    fn negative_range_and_capacity_errors() {
        let cfg = CorpusConfig {
            room_coeffs: vec![0.0],
            ..Default::default()
        };
        let lang = build_language(&cfg).unwrap();
        let utt = render_utterance(&lang, &[lang.objects[0]], factors(), 1).unwrap();
        let n = utt.duration_frames();
        assert!(make_consistency_negative(&lang, &utt, Axis::Speaker, n, 0).is_err());
        assert!(make_consistency_negative(&lang, &utt, Axis::Speaker, 0, 0).is_err());
        assert!(matches!(
            make_consistency_negative(&lang, &utt, Axis::Room, 1, 0),
            Err(Error::Capacity { .. })
        ));
    }
}
