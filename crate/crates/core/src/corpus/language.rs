//! Phoneme inventory, lexicon and a tiny grammar with number agreement and
//! topical sentence pairs.

use std::collections::{HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng, TAG_LANGUAGE};

pub type WordId = u32;
pub type PhonemeId = u8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhonemeClass {
    Onset,
    Medial,
    Coda,
    /// No phonotactic constraints.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phoneme {
    pub id: PhonemeId,
    pub symbol: String,
    pub class: PhonemeClass,
    /// Rendering template; nonzero only in the semantic coordinates.
    pub base: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WordRole {
    Noun { stem: usize, plural: bool },
    Verb { stem: usize, plural: bool },
    Determiner,
    Object,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub id: WordId,
    pub phonemes: Vec<PhonemeId>,
    pub role: WordRole,
    pub topic: usize,
    pub spelling: String,
}

/// Zero-mean periodic background pattern along one acoustic direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub direction: Vec<f64>,
    pub period: f64,
    pub phase: f64,
}

impl Background {
    pub fn amplitude(&self, t: usize) -> f64 {
        (std::f64::consts::TAU * t as f64 / self.period + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Language {
    pub config: CorpusConfig,
    pub phonemes: Vec<Phoneme>,
    pub words: Vec<Word>,
    /// `(singular, plural)` noun forms sharing a stem.
    pub noun_pairs: Vec<(WordId, WordId)>,
    /// `(singular, plural)` verb forms sharing a stem.
    pub verb_pairs: Vec<(WordId, WordId)>,
    pub determiners: Vec<WordId>,
    pub objects: Vec<WordId>,
    pub n_topics: usize,
    /// Unit vectors in the acoustic subspace, orthogonal to `prosody_basis`.
    pub speakers: Vec<Vec<f64>>,
    pub prosody_basis: Vec<f64>,
    pub backgrounds: Vec<Background>,
    word_index: HashMap<Vec<PhonemeId>, WordId>,
}

const ONSET_SYMBOLS: &[&str] = &["p", "t", "k", "b", "d", "g", "f", "h", "j", "w", "v", "c"];
const MEDIAL_SYMBOLS: &[&str] = &["a", "e", "i", "o", "u", "y"];
const CODA_SYMBOLS: &[&str] = &["n", "s", "m", "l", "r", "z", "x", "q"];

fn symbol(pool: &[&str], i: usize) -> String {
    if i < pool.len() {
        pool[i].to_string()
    } else {
        format!("{}{}", pool[i % pool.len()], i / pool.len())
    }
}

/// Onset / medial / coda class sizes for `p` phonemes.
fn class_sizes(p: usize) -> (usize, usize, usize) {
    let medial = ((p as f64 * 0.3).round() as usize).clamp(usize::from(p > 0), p);
    let onset = (p - medial).div_ceil(2);
    let coda = p - medial - onset;
    (onset, medial, coda)
}

/// Number of distinct legal phoneme strings with lengths in the configured
/// range, saturating at `u128::MAX`.
pub fn legal_string_count(config: &CorpusConfig) -> u128 {
    let p = config.n_phonemes as u128;
    let mut total: u128 = 0;
    for len in config.word_len_min..=config.word_len_max {
        let n = if config.phonotactics {
            let (o, m, c) = class_sizes(config.n_phonemes);
            let (o, m, c) = (o as u128, m as u128, c as u128);
            if len < 2 {
                0
            } else {
                let middle = len - 2;
                let medial_seqs = if middle == 0 {
                    1
                } else {
                    m.saturating_mul((m.saturating_sub(1)).saturating_pow(middle as u32 - 1))
                };
                o.saturating_mul(c).saturating_mul(medial_seqs)
            }
        } else {
            p.saturating_pow(len as u32)
        };
        total = total.saturating_add(n);
    }
    total
}

struct Inventory {
    onset: Vec<PhonemeId>,
    medial: Vec<PhonemeId>,
    coda: Vec<PhonemeId>,
    all: Vec<PhonemeId>,
    phonotactic: bool,
}

impl Inventory {
    /// Random legal string of `len` phonemes whose final phoneme is drawn from
    /// `finals` (any legal final when empty).
    fn sample(&self, rng: &mut Rng, len: usize, finals: &[PhonemeId]) -> Vec<PhonemeId> {
        if !self.phonotactic {
            let mut s: Vec<PhonemeId> = (0..len).map(|_| *self.all.choose(rng).unwrap()).collect();
            if !finals.is_empty() && len > 0 {
                s[len - 1] = *finals.choose(rng).unwrap();
            }
            return s;
        }
        let mut s = self.stem(rng, len - 1);
        let coda = if finals.is_empty() { &self.coda } else { finals };
        s.push(*coda.choose(rng).unwrap());
        s
    }

    /// Onset followed by medials with no immediate repeats.
    fn stem(&self, rng: &mut Rng, len: usize) -> Vec<PhonemeId> {
        if !self.phonotactic {
            return (0..len).map(|_| *self.all.choose(rng).unwrap()).collect();
        }
        let mut s = Vec::with_capacity(len + 1);
        if len == 0 {
            return s;
        }
        s.push(*self.onset.choose(rng).unwrap());
        while s.len() < len {
            let prev = *s.last().unwrap();
            let options: Vec<PhonemeId> = self.medial.iter().copied().filter(|&m| m != prev).collect();
            // degenerate inventories cannot reach this length; callers check
            let Some(&next) = options.choose(rng) else { break };
            s.push(next);
        }
        s
    }

    fn is_legal(&self, s: &[PhonemeId]) -> bool {
        if !self.phonotactic {
            return true;
        }
        if s.len() < 2 {
            return false;
        }
        let in_set = |set: &[PhonemeId], p: PhonemeId| set.contains(&p);
        in_set(&self.onset, s[0])
            && in_set(&self.coda, s[s.len() - 1])
            && s[1..s.len() - 1].iter().all(|&p| in_set(&self.medial, p))
            && s[1..s.len() - 1].windows(2).all(|w| w[0] != w[1])
    }

    /// All legal strings in lexicographic order, for near-capacity fills.
    fn enumerate(&self, lengths: std::ops::RangeInclusive<usize>, limit: usize) -> Vec<Vec<PhonemeId>> {
        let n = self.all.len() as u128;
        let mut out = Vec::new();
        if n == 0 {
            return out;
        }
        for len in lengths {
            let total = n.checked_pow(len as u32).unwrap_or(u128::MAX);
            let mut x: u128 = 0;
            while x < total {
                let mut rest = x;
                let mut s = vec![0 as PhonemeId; len];
                for slot in s.iter_mut().rev() {
                    *slot = self.all[(rest % n) as usize];
                    rest /= n;
                }
                if self.is_legal(&s) {
                    out.push(s);
                    if out.len() >= limit {
                        return out;
                    }
                }
                x += 1;
            }
        }
        out
    }
}

fn unit_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Builds the phoneme inventory, lexicon and acoustic factor tables. A pure
/// function of the config.
pub fn build_language(config: &CorpusConfig) -> Result<Language> {
    config.validate()?;
    let available = legal_string_count(config);
    if (config.lexicon_size as u128) > available {
        return Err(Error::Capacity {
            what: "distinct legal phoneme strings".into(),
            requested: config.lexicon_size,
            available: available.min(usize::MAX as u128) as usize,
        });
    }
    if config.lexicon_size < 5 {
        return Err(Error::config(
            "lexicon_size",
            "grammar needs at least a noun pair, a verb pair and an object (>= 5 words)",
        ));
    }
    let mut rng = rng_for(config.seed, &[TAG_LANGUAGE]);
    let p = config.n_phonemes;
    let (n_onset, n_medial, _) = class_sizes(p);

    let mut phonemes = Vec::with_capacity(p);
    let min_sep = 1.0;
    for i in 0..p {
        let class = if !config.phonotactics {
            PhonemeClass::Free
        } else if i < n_onset {
            PhonemeClass::Onset
        } else if i < n_onset + n_medial {
            PhonemeClass::Medial
        } else {
            PhonemeClass::Coda
        };
        let symbol = match class {
            PhonemeClass::Onset => symbol(ONSET_SYMBOLS, i),
            PhonemeClass::Medial => symbol(MEDIAL_SYMBOLS, i - n_onset),
            PhonemeClass::Coda => symbol(CODA_SYMBOLS, i - n_onset - n_medial),
            PhonemeClass::Free => {
                let pool: Vec<&str> = ONSET_SYMBOLS
                    .iter()
                    .chain(MEDIAL_SYMBOLS)
                    .chain(CODA_SYMBOLS)
                    .copied()
                    .collect();
                symbol(&pool, i)
            }
        };
        // keep templates well separated so nearest-template lookups are stable
        let mut base = vec![0.0; config.dim];
        for attempt in 0..256 {
            let sem = unit_normal(&mut rng, config.semantic_dim);
            base[..config.semantic_dim].copy_from_slice(&sem);
            let far_enough = phonemes.iter().all(|other: &Phoneme| {
                let d: f64 = other.base.iter().zip(&base).map(|(a, b)| (a - b) * (a - b)).sum();
                d.sqrt() >= min_sep
            });
            if far_enough || attempt == 255 {
                break;
            }
        }
        phonemes.push(Phoneme {
            id: i as PhonemeId,
            symbol,
            class,
            base,
        });
    }

    let ids_of = |class: PhonemeClass| -> Vec<PhonemeId> {
        phonemes.iter().filter(|ph| ph.class == class).map(|ph| ph.id).collect()
    };
    let inventory = Inventory {
        onset: ids_of(PhonemeClass::Onset),
        medial: ids_of(PhonemeClass::Medial),
        coda: ids_of(PhonemeClass::Coda),
        all: phonemes.iter().map(|ph| ph.id).collect(),
        phonotactic: config.phonotactics,
    };

    // number markers are word-final phonemes
    let finals: Vec<PhonemeId> = if config.phonotactics {
        inventory.coda.clone()
    } else {
        inventory.all.clone()
    };
    let marker = |i: usize| finals[i % finals.len()];
    let (noun_sg, noun_pl, verb_sg, verb_pl) = (marker(0), marker(1), marker(2), marker(3));
    let other_finals: Vec<PhonemeId> = if finals.len() > 4 {
        finals[4..].to_vec()
    } else {
        Vec::new()
    };

    let lexicon_size = config.lexicon_size;
    let n_det = lexicon_size / 64;
    let mut n_pairs = (lexicon_size / 8).max(1);
    while 4 * n_pairs + n_det + 1 > lexicon_size && n_pairs > 1 {
        n_pairs -= 1;
    }
    let stem_lens = config.word_len_min.saturating_sub(1).max(1)..=config.word_len_max - 1;
    let morphology = config.word_len_max >= 2;

    let mut used: HashSet<Vec<PhonemeId>> = HashSet::new();
    let mut words: Vec<Word> = Vec::with_capacity(lexicon_size);
    let max_tries = 2000;

    let push_word = |phs: Vec<PhonemeId>, role: WordRole, used: &mut HashSet<Vec<PhonemeId>>, words: &mut Vec<Word>| -> WordId {
        let id = words.len() as WordId;
        used.insert(phs.clone());
        words.push(Word {
            id,
            phonemes: phs,
            role,
            topic: 0,
            spelling: String::new(),
        });
        id
    };

    let pairs_for = |sg_mark: PhonemeId,
                         pl_mark: PhonemeId,
                         verb: bool,
                         used: &mut HashSet<Vec<PhonemeId>>,
                         words: &mut Vec<Word>,
                         rng: &mut Rng|
     -> Vec<(WordId, WordId)> {
        let mut out = Vec::new();
        if !morphology {
            return out;
        }
        for stem_idx in 0..n_pairs {
            for _ in 0..max_tries {
                let len = rng.random_range(stem_lens.clone());
                let stem = inventory.stem(rng, len);
                if stem.len() != len {
                    continue;
                }
                let mut sg = stem.clone();
                sg.push(sg_mark);
                let mut pl = stem;
                pl.push(pl_mark);
                if sg == pl || used.contains(&sg) || used.contains(&pl) {
                    continue;
                }
                let role = |plural| {
                    if verb {
                        WordRole::Verb { stem: stem_idx, plural }
                    } else {
                        WordRole::Noun { stem: stem_idx, plural }
                    }
                };
                let a = push_word(sg, role(false), used, words);
                let b = push_word(pl, role(true), used, words);
                out.push((a, b));
                break;
            }
        }
        out
    };

    let noun_pairs = pairs_for(noun_sg, noun_pl, false, &mut used, &mut words, &mut rng);
    let verb_pairs = pairs_for(verb_sg, verb_pl, true, &mut used, &mut words, &mut rng);
    if noun_pairs.is_empty() || verb_pairs.is_empty() {
        return Err(Error::Capacity {
            what: "noun/verb stems with free singular and plural forms".into(),
            requested: n_pairs,
            available: noun_pairs.len().min(verb_pairs.len()),
        });
    }

    let remaining = lexicon_size - words.len();
    let n_det = n_det.min(remaining.saturating_sub(1));
    let mut determiners = Vec::new();
    let mut objects = Vec::new();
    let mut fill: Vec<Vec<PhonemeId>> = Vec::new();
    for _ in 0..lexicon_size - words.len() {
        let mut found = None;
        for _ in 0..max_tries {
            let len = rng.random_range(config.word_len_min..=config.word_len_max);
            let s = inventory.sample(&mut rng, len, &other_finals);
            if s.len() == len && inventory.is_legal(&s) && !used.contains(&s) && !fill.contains(&s) {
                found = Some(s);
                break;
            }
        }
        match found {
            Some(s) => fill.push(s),
            None => break,
        }
    }
    if words.len() + fill.len() < lexicon_size {
        // near capacity: take the lexicographically first unused strings
        let need = lexicon_size - words.len() - fill.len();
        let taken: HashSet<Vec<PhonemeId>> = used.iter().chain(fill.iter()).cloned().collect();
        let extra: Vec<_> = inventory
            .enumerate(config.word_len_min..=config.word_len_max, lexicon_size * 4 + 64)
            .into_iter()
            .filter(|s| !taken.contains(s))
            .take(need)
            .collect();
        if extra.len() < need {
            return Err(Error::Capacity {
                what: "distinct legal phoneme strings".into(),
                requested: lexicon_size,
                available: words.len() + fill.len() + extra.len(),
            });
        }
        fill.extend(extra);
    }
    for (i, s) in fill.into_iter().enumerate() {
        let role = if i < n_det { WordRole::Determiner } else { WordRole::Object };
        let id = push_word(s, role, &mut used, &mut words);
        if i < n_det {
            determiners.push(id);
        } else {
            objects.push(id);
        }
    }

    let n_topics = config
        .n_topics
        .min(noun_pairs.len())
        .min(verb_pairs.len())
        .min(objects.len())
        .max(1);
    for (i, &(a, b)) in noun_pairs.iter().enumerate() {
        words[a as usize].topic = i % n_topics;
        words[b as usize].topic = i % n_topics;
    }
    for (i, &(a, b)) in verb_pairs.iter().enumerate() {
        words[a as usize].topic = i % n_topics;
        words[b as usize].topic = i % n_topics;
    }
    for (i, &o) in objects.iter().enumerate() {
        words[o as usize].topic = i % n_topics;
    }
    for w in &mut words {
        w.spelling = w.phonemes.iter().map(|&p| phonemes[p as usize].symbol.as_str()).collect();
    }

    // acoustic factor tables
    let sd = config.semantic_dim;
    let ad = config.acoustic_dim();
    let embed = |v: Vec<f64>| {
        let mut full = vec![0.0; config.dim];
        full[sd..].copy_from_slice(&v);
        full
    };
    let mut prosody = unit_normal(&mut rng, ad);
    normalize(&mut prosody);
    let speakers = (0..config.n_speakers)
        .map(|_| {
            let mut v = unit_normal(&mut rng, ad);
            let along: f64 = v.iter().zip(&prosody).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(&prosody).for_each(|(x, p)| *x -= along * p);
            normalize(&mut v);
            embed(v)
        })
        .collect();
    let backgrounds = (0..config.n_backgrounds)
        .map(|_| {
            let mut d = unit_normal(&mut rng, ad);
            normalize(&mut d);
            Background {
                direction: embed(d),
                period: rng.random_range(3.0..9.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();

    let word_index = words.iter().map(|w| (w.phonemes.clone(), w.id)).collect();
    Ok(Language {
        config: config.clone(),
        phonemes,
        words,
        noun_pairs,
        verb_pairs,
        determiners,
        objects,
        n_topics,
        speakers,
        prosody_basis: embed(prosody),
        backgrounds,
        word_index,
    })
}

impl Language {
    pub fn word(&self, id: WordId) -> Result<&Word> {
        self.words
            .get(id as usize)
            .ok_or_else(|| Error::range("word id", format!("{id} >= lexicon size {}", self.words.len())))
    }

    pub fn lookup(&self, phonemes: &[PhonemeId]) -> Option<WordId> {
        self.word_index.get(phonemes).copied()
    }

    pub fn phonemes_of(&self, words: &[WordId]) -> Result<Vec<PhonemeId>> {
        let mut out = Vec::new();
        for &w in words {
            out.extend_from_slice(&self.word(w)?.phonemes);
        }
        Ok(out)
    }

    pub fn spell(&self, words: &[WordId]) -> String {
        words
            .iter()
            .filter_map(|&w| self.words.get(w as usize))
            .map(|w| w.spelling.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`Language::spell`]; fails on out-of-lexicon tokens.
    pub fn parse_words(&self, text: &str) -> Result<Vec<WordId>> {
        text.split_whitespace()
            .map(|tok| {
                self.words
                    .iter()
                    .find(|w| w.spelling == tok)
                    .map(|w| w.id)
                    .ok_or_else(|| Error::range("word", format!("`{tok}` is not in the lexicon")))
            })
            .collect()
    }

    fn pick_in_topic(&self, rng: &mut Rng, ids: &[WordId], topic: usize) -> WordId {
        let in_topic: Vec<WordId> = ids
            .iter()
            .copied()
            .filter(|&w| self.words[w as usize].topic == topic)
            .collect();
        *in_topic.choose(rng).unwrap_or_else(|| ids.choose(rng).unwrap())
    }

    fn pick_pair_in_topic(&self, rng: &mut Rng, pairs: &[(WordId, WordId)], topic: usize) -> (WordId, WordId) {
        let in_topic: Vec<(WordId, WordId)> = pairs
            .iter()
            .copied()
            .filter(|&(a, _)| self.words[a as usize].topic == topic)
            .collect();
        *in_topic.choose(rng).unwrap_or_else(|| pairs.choose(rng).unwrap())
    }

    /// `[determiner] noun verb object`, verb agreeing with the noun in number.
    pub fn sample_sentence(&self, rng: &mut Rng, topic: usize) -> Vec<WordId> {
        let plural = rng.random_bool(0.5);
        let mut s = Vec::with_capacity(4);
        if !self.determiners.is_empty() && rng.random_bool(0.5) {
            s.push(*self.determiners.choose(rng).unwrap());
        }
        let noun = self.pick_pair_in_topic(rng, &self.noun_pairs, topic);
        let verb = self.pick_pair_in_topic(rng, &self.verb_pairs, topic);
        s.push(if plural { noun.1 } else { noun.0 });
        s.push(if plural { verb.1 } else { verb.0 });
        s.push(self.pick_in_topic(rng, &self.objects, topic));
        s
    }

    /// The agreement-violating variant of a grammatical sentence: the verb is
    /// replaced by its other-number form. Exactly one word slot differs.
    pub fn agreement_violation(&self, sentence: &[WordId]) -> Option<Vec<WordId>> {
        let pos = sentence
            .iter()
            .position(|&w| matches!(self.words[w as usize].role, WordRole::Verb { .. }))?;
        let verb = sentence[pos];
        let (sg, pl) = *self.verb_pairs.iter().find(|&&(a, b)| a == verb || b == verb)?;
        let mut out = sentence.to_vec();
        out[pos] = if verb == sg { pl } else { sg };
        Some(out)
    }

    pub fn is_grammatical(&self, sentence: &[WordId]) -> bool {
        let mut noun_plural = None;
        for &w in sentence {
            match self.words[w as usize].role {
                WordRole::Noun { plural, .. } => noun_plural = Some(plural),
                WordRole::Verb { plural, .. } => return noun_plural == Some(plural),
                _ => {}
            }
        }
        false
    }

    /// Word sequence for one utterance: sentences sharing a topic until a
    /// sampled sentence count is reached.
    pub fn sample_utterance_words(&self, rng: &mut Rng) -> Vec<WordId> {
        let c = &self.config;
        let max_sentences = if c.max_sentences > 0 {
            c.max_sentences
        } else {
            let avg_word = (c.word_len_min + c.word_len_max) as f64 / 2.0;
            let avg_frames = (c.phone_frames_min + c.phone_frames_max) as f64 / 2.0;
            let sentence_frames = 3.5 * avg_word * avg_frames;
            ((c.max_frames as f64 / sentence_frames).floor() as usize).max(1)
        };
        let n = rng.random_range(1..=max_sentences);
        let topic = rng.random_range(0..self.n_topics);
        (0..n).flat_map(|_| self.sample_sentence(rng, topic)).collect()
    }

    /// Prompt sentence, a same-topic continuation and a different-topic one.
    pub fn sample_topic_pair(&self, rng: &mut Rng) -> Option<(Vec<WordId>, Vec<WordId>, Vec<WordId>)> {
        if self.n_topics < 2 {
            return None;
        }
        let topic = rng.random_range(0..self.n_topics);
        let mut other = rng.random_range(0..self.n_topics - 1);
        if other >= topic {
            other += 1;
        }
        let prompt = self.sample_sentence(rng, topic);
        let coherent = self.sample_sentence(rng, topic);
        let incoherent = self.sample_sentence(rng, other);
        Some((prompt, coherent, incoherent))
    }

    fn inventory(&self) -> Inventory {
        let ids_of = |class: PhonemeClass| -> Vec<PhonemeId> {
            self.phonemes.iter().filter(|ph| ph.class == class).map(|ph| ph.id).collect()
        };
        Inventory {
            onset: ids_of(PhonemeClass::Onset),
            medial: ids_of(PhonemeClass::Medial),
            coda: ids_of(PhonemeClass::Coda),
            all: self.phonemes.iter().map(|ph| ph.id).collect(),
            phonotactic: self.config.phonotactics,
        }
    }

    pub fn is_legal_string(&self, s: &[PhonemeId]) -> bool {
        (self.config.word_len_min..=self.config.word_len_max).contains(&s.len())
            && self.inventory().is_legal(s)
    }

    /// A phonotactically legal string of `len` phonemes that is not a word,
    /// ending like `reference` when one is given.
    pub fn sample_pseudo_word(&self, rng: &mut Rng, len: usize, reference: Option<WordId>) -> Option<Vec<PhonemeId>> {
        let inv = self.inventory();
        let finals: Vec<PhonemeId> = match reference {
            Some(w) if self.config.phonotactics => {
                let last = *self.words[w as usize].phonemes.last()?;
                // any coda used by words of the same role family
                let role = self.words[w as usize].role;
                let mut f: Vec<PhonemeId> = self
                    .words
                    .iter()
                    .filter(|x| std::mem::discriminant(&x.role) == std::mem::discriminant(&role))
                    .filter_map(|x| x.phonemes.last().copied())
                    .collect();
                f.sort_unstable();
                f.dedup();
                if f.is_empty() {
                    vec![last]
                } else {
                    f
                }
            }
            _ => Vec::new(),
        };
        for _ in 0..4000 {
            let s = inv.sample(rng, len, &finals);
            if s.len() == len && inv.is_legal(&s) && !self.word_index.contains_key(&s) {
                return Some(s);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn lang() -> Language {
        build_language(&CorpusConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_in_seed() {
        let a = lang();
        let b = lang();
        assert_eq!(a, b);
        let c = build_language(&CorpusConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.words, c.words);
    }

    #[test]
    fn lexicon_is_distinct_and_legal() {
        let l = lang();
        assert_eq!(l.words.len(), 256);
        let set: HashSet<_> = l.words.iter().map(|w| w.phonemes.clone()).collect();
        assert_eq!(set.len(), 256);
        for w in &l.words {
            assert!((2..=4).contains(&w.phonemes.len()), "{w:?}");
            assert!(l.is_legal_string(&w.phonemes));
        }
        let spellings: HashSet<_> = l.words.iter().map(|w| w.spelling.clone()).collect();
        assert_eq!(spellings.len(), 256);
    }

    #[test]
    fn pseudo_words_never_hit_the_lexicon() {
        let l = lang();
        let lexicon: HashSet<_> = l.words.iter().map(|w| w.phonemes.clone()).collect();
        let mut rng = Rng::seed_from_u64(5);
        for i in 0..2000 {
            let len = 2 + i % 3;
            let reference = Some(l.objects[i % l.objects.len()]);
            let pw = l.sample_pseudo_word(&mut rng, len, reference).unwrap();
            assert_eq!(pw.len(), len);
            assert!(!lexicon.contains(&pw));
            assert!(l.is_legal_string(&pw));
        }
    }

    #[test]
    fn single_phoneme_inventory_hits_capacity() {
        let cfg = CorpusConfig {
            n_phonemes: 1,
            lexicon_size: 4,
            phonotactics: false,
            ..Default::default()
        };
        // lengths 2..=4 over one phoneme: exactly three strings
        assert_eq!(legal_string_count(&cfg), 3);
        match build_language(&cfg) {
            Err(Error::Capacity { available, requested, .. }) => {
                assert_eq!(available, 3);
                assert_eq!(requested, 4);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
        let phonotactic = CorpusConfig {
            phonotactics: true,
            ..cfg
        };
        assert!(matches!(build_language(&phonotactic), Err(Error::Capacity { .. })));
    }

    #[test]
    fn capacity_count_matches_enumeration() {
        for phonotactics in [false, true] {
            let cfg = CorpusConfig {
                n_phonemes: 6,
                phonotactics,
                ..Default::default()
            };
            let (o, m, c) = class_sizes(6);
            let ph: Vec<PhonemeId> = (0..6).collect();
            let inv = Inventory {
                onset: ph[..o].to_vec(),
                medial: ph[o..o + m].to_vec(),
                coda: ph[o + m..o + m + c].to_vec(),
                all: ph,
                phonotactic: phonotactics,
            };
            let n = inv.enumerate(2..=4, usize::MAX).len() as u128;
            assert_eq!(n, legal_string_count(&cfg));
        }
    }

    #[test]
    fn near_capacity_lexicon_fills_exactly() {
        let cfg = CorpusConfig {
            n_phonemes: 3,
            phonotactics: false,
            lexicon_size: 100,
            ..Default::default()
        };
        // 9 + 27 + 81 = 117 strings available
        let l = build_language(&cfg).unwrap();
        let set: HashSet<_> = l.words.iter().map(|w| w.phonemes.clone()).collect();
        assert_eq!(set.len(), 100);
    }

    #[test]
    fn minimal_pairs_differ_in_one_slot() {
        let l = lang();
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = l.sample_sentence(&mut rng, 0);
            assert!(l.is_grammatical(&s));
            let bad = l.agreement_violation(&s).unwrap();
            assert!(!l.is_grammatical(&bad));
            assert_eq!(s.len(), bad.len());
            assert_eq!(s.iter().zip(&bad).filter(|(a, b)| a != b).count(), 1);
            let (pa, pb) = (l.phonemes_of(&s).unwrap(), l.phonemes_of(&bad).unwrap());
            assert_eq!(pa.len(), pb.len());
        }
    }

    #[test]
    fn word_boundaries_are_unambiguous() {
        let l = lang();
        // codas only at word ends, onsets only at word starts
        for w in &l.words {
            let classes: Vec<_> = w.phonemes.iter().map(|&p| l.phonemes[p as usize].class).collect();
            assert_eq!(classes[0], PhonemeClass::Onset);
            assert_eq!(*classes.last().unwrap(), PhonemeClass::Coda);
            assert!(classes[1..classes.len() - 1].iter().all(|c| *c == PhonemeClass::Medial));
        }
    }

    #[test]
    fn speakers_are_acoustic_and_orthogonal_to_prosody() {
        let l = lang();
        let sd = l.config.semantic_dim;
        for s in &l.speakers {
            assert!(s[..sd].iter().all(|&x| x == 0.0));
            let along: f64 = s.iter().zip(&l.prosody_basis).map(|(a, b)| a * b).sum();
            assert!(along.abs() < 1e-12);
            let n: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        for ph in &l.phonemes {
            assert!(ph.base[sd..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn spelling_round_trips() {
        let l = lang();
        let words: Vec<WordId> = vec![0, 5, 17, 200];
        assert_eq!(l.parse_words(&l.spell(&words)).unwrap(), words);
        assert!(l.parse_words("zzzz").is_err());
    }
}
