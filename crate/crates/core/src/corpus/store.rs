//! Corpus generation and the on-disk layout: `index.jsonl` (header line plus
//! one record per utterance) and one `SFR1` frame file per utterance.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::CorpusConfig;
use super::language::{build_language, Language, PhonemeId, WordId};
use super::render::{draw_durations, render_utterance, AcousticFactors, FeatureFrameSeq, Utterance};
use crate::binio::{read_file, write_file, LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, stable_hash, TAG_SPLIT, TAG_UTTERANCE};

pub const INDEX_FILE: &str = "index.jsonl";
pub const FRAMES_DIR: &str = "frames";
const FRAME_MAGIC: &[u8; 4] = b"SFR1";
const INDEX_FORMAT: &str = "speechlm-corpus";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub format: String,
    pub version: u32,
    pub n_utterances: usize,
    pub config: CorpusConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub words: Vec<WordId>,
    pub phonemes: Vec<PhonemeId>,
    pub speaker_id: usize,
    pub sentiment: f64,
    pub background_id: usize,
    pub room_coeff: f64,
    pub frames_path: String,
    pub n_frames: usize,
    pub split: Split,
}

pub fn utterance_id(index: usize) -> String {
    format!("utt{index:06}")
}

/// Inverse of [`utterance_id`].
pub fn utterance_index(id: &str) -> Option<usize> {
    id.strip_prefix("utt")?.parse().ok()
}

pub fn split_of(config: &CorpusConfig, id: &str) -> Split {
    let h = derive_seed(config.seed, &[TAG_SPLIT, stable_hash(id)]);
    // top 53 bits as a uniform draw in [0, 1)
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    if u < config.heldout_fraction {
        Split::Heldout
    } else {
        Split::Train
    }
}

/// Generates utterance `index` of the corpus. A pure function of the
/// language (and hence the config) and the index.
pub fn generate_utterance(lang: &Language, index: usize) -> Result<Utterance> {
    let c = &lang.config;
    let seed = derive_seed(c.seed, &[TAG_UTTERANCE, index as u64]);
    let mut rng = rng_for(seed, &[0]);
    let target = rng.random_range(c.min_frames..=c.max_frames);
    let factors = AcousticFactors {
        speaker_id: rng.random_range(0..c.n_speakers),
        sentiment: *c.sentiment_levels.choose(&mut rng).unwrap(),
        background_id: rng.random_range(0..c.n_backgrounds),
        room_coeff: *c.room_coeffs.choose(&mut rng).unwrap(),
    };

    // enough words to overshoot the largest length, then cut at a word boundary
    let topic = rng.random_range(0..lang.n_topics);
    let mut candidate: Vec<WordId> = Vec::new();
    let min_word_frames = c.word_len_min * c.phone_frames_min;
    while candidate.len() * min_word_frames <= c.max_frames {
        candidate.extend(lang.sample_sentence(&mut rng, topic));
    }
    let n_ph: usize = candidate
        .iter()
        .map(|&w| lang.words[w as usize].phonemes.len())
        .sum();
    let durations = draw_durations(lang, n_ph, seed);
    let mut cut = 0;
    let mut frames = 0;
    let mut ph = 0;
    for (i, &w) in candidate.iter().enumerate() {
        let len = lang.words[w as usize].phonemes.len();
        let f: usize = durations[ph..ph + len].iter().map(|&d| d as usize).sum();
        let fits_target = frames + f <= target;
        let needed = frames < c.min_frames;
        if i > 0 && !fits_target && !(needed && frames + f <= c.max_frames) {
            break;
        }
        frames += f;
        ph += len;
        cut = i + 1;
    }
    let mut utt = render_utterance(lang, &candidate[..cut], factors, seed)?;
    utt.id = utterance_id(index);
    Ok(utt)
}

pub fn encode_frames(frames: &FeatureFrameSeq) -> Result<Vec<u8>> {
    let t = u32::try_from(frames.len()).map_err(|_| Error::range("T'", "exceeds 32 bits"))?;
    let d = u32::try_from(frames.dim).map_err(|_| Error::range("D", "exceeds 32 bits"))?;
    let mut w = LeWriter::new();
    w.bytes(FRAME_MAGIC).u32(t).u32(d).f32s(frames.data.iter().copied());
    Ok(w.into_inner())
}

pub fn decode_frames(bytes: &[u8], path: &Path, frame_rate_hz: f64) -> Result<FeatureFrameSeq> {
    let mut r = LeReader::new(bytes, path);
    r.expect_magic(FRAME_MAGIC)?;
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    if d == 0 {
        return Err(r.error("D=0"));
    }
    if r.remaining() != t * d * 4 {
        return Err(r.error(format!(
            "payload holds {} bytes, header declares {t}x{d} floats",
            r.remaining()
        )));
    }
    let data = r.f32s(t * d)?;
    r.finish()?;
    FeatureFrameSeq::new(data, d, frame_rate_hz).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_frames(path: &Path, frames: &FeatureFrameSeq) -> Result<()> {
    write_file(path, &encode_frames(frames)?)
}

pub fn read_frames(path: &Path, frame_rate_hz: f64) -> Result<FeatureFrameSeq> {
    decode_frames(&read_file(path)?, path, frame_rate_hz)
}

fn record_of(config: &CorpusConfig, utt: &Utterance) -> UtteranceRecord {
    UtteranceRecord {
        id: utt.id.clone(),
        words: utt.words.clone(),
        phonemes: utt.phonemes.clone(),
        speaker_id: utt.factors.speaker_id,
        sentiment: utt.factors.sentiment,
        background_id: utt.factors.background_id,
        room_coeff: utt.factors.room_coeff,
        frames_path: format!("{FRAMES_DIR}/{}.sfr", utt.id),
        n_frames: utt.duration_frames(),
        split: split_of(config, &utt.id),
    }
}

/// Writes the corpus under `dir` and returns its records.
pub fn gen_corpus(config: &CorpusConfig, dir: &Path) -> Result<Vec<UtteranceRecord>> {
    let lang = build_language(config)?;
    let frames_dir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let header = IndexHeader {
        format: INDEX_FORMAT.into(),
        version: INDEX_VERSION,
        n_utterances: config.n_utterances,
        config: config.clone(),
    };
    let mut index = Vec::new();
    writeln!(index, "{}", serde_json::to_string(&header)?).expect("write to Vec");
    let mut records = Vec::with_capacity(config.n_utterances);
    for i in 0..config.n_utterances {
        let utt = generate_utterance(&lang, i)?;
        let rec = record_of(config, &utt);
        write_frames(&dir.join(&rec.frames_path), &utt.frames)?;
        writeln!(index, "{}", serde_json::to_string(&rec)?).expect("write to Vec");
        records.push(rec);
    }
    write_file(&dir.join(INDEX_FILE), &index)?;
    Ok(records)
}

/// A corpus directory: the regenerated language plus the index records.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub language: Language,
    pub records: Vec<UtteranceRecord>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Corpus> {
        let path = dir.join(INDEX_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format(&path, "missing header line"))?
            .map_err(|e| Error::io(&path, e))?;
        let header: IndexHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::format(&path, format!("header: {e}")))?;
        if header.format != INDEX_FORMAT || header.version != INDEX_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported index {} v{}", header.format, header.version),
            ));
        }
        let mut records = Vec::with_capacity(header.n_utterances);
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: UtteranceRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(&path, format!("line {}: {e}", n + 2)))?;
            records.push(rec);
        }
        if records.len() != header.n_utterances {
            return Err(Error::format(
                &path,
                format!(
                    "header declares {} utterances, index holds {}",
                    header.n_utterances,
                    records.len()
                ),
            ));
        }
        let language = build_language(&header.config)?;
        Ok(Corpus {
            dir: dir.to_path_buf(),
            language,
            records,
        })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.language.config
    }

    pub fn frames(&self, rec: &UtteranceRecord) -> Result<FeatureFrameSeq> {
        let f = read_frames(&self.dir.join(&rec.frames_path), self.config().frame_rate_hz)?;
        if f.len() != rec.n_frames {
            return Err(Error::Data {
                utterance: rec.id.clone(),
                reason: format!("frame file holds {} frames, index says {}", f.len(), rec.n_frames),
            });
        }
        Ok(f)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> CorpusConfig {
        CorpusConfig {
            n_utterances: n,
            ..Default::default()
        }
    }

    #[test]
    fn empty_corpus_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let recs = gen_corpus(&small(0), dir.path()).unwrap();
        assert!(recs.is_empty());
        let text = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert_eq!(text.lines().count(), 1);
        let corpus = Corpus::load(dir.path()).unwrap();
        assert!(corpus.records.is_empty());
    }

    #[test]
    fn durations_stay_in_bounds_and_span_range() {
        let cfg = small(1000);
        let lang = build_language(&cfg).unwrap();
        let lens: Vec<usize> = (0..1000)
            .map(|i| generate_utterance(&lang, i).unwrap().duration_frames())
            .collect();
        let (lo, hi) = (*lens.iter().min().unwrap(), *lens.iter().max().unwrap());
        assert!(lo >= 12 && hi <= 250, "{lo}..{hi}");
        assert!(lo < 30 && hi > 230, "range barely covered: {lo}..{hi}");
    }

    #[test]
    fn utterance_phonemes_concatenate_words() {
        let lang = build_language(&small(10)).unwrap();
        for i in 0..50 {
            let u = generate_utterance(&lang, i).unwrap();
            assert_eq!(u.phonemes, lang.phonemes_of(&u.words).unwrap());
            let total: usize = u.durations.iter().map(|&d| d as usize).sum();
            assert_eq!(total, u.duration_frames());
        }
    }

    #[test]
    fn byte_identical_directories() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_corpus(&small(20), a.path()).unwrap();
        gen_corpus(&small(20), b.path()).unwrap();
        let read = |p: &Path| fs::read(p).unwrap();
        assert_eq!(read(&a.path().join(INDEX_FILE)), read(&b.path().join(INDEX_FILE)));
        for i in 0..20 {
            let rel = format!("{FRAMES_DIR}/{}.sfr", utterance_id(i));
            assert_eq!(read(&a.path().join(&rel)), read(&b.path().join(&rel)));
        }
    }

    #[test]
    fn load_round_trips_frames() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(5);
        gen_corpus(&cfg, dir.path()).unwrap();
        let corpus = Corpus::load(dir.path()).unwrap();
        let lang = build_language(&cfg).unwrap();
        for (i, rec) in corpus.records.iter().enumerate() {
            let f = corpus.frames(rec).unwrap();
            assert_eq!(f, generate_utterance(&lang, i).unwrap().frames);
        }
    }

    #[test]
    fn frame_file_errors_name_the_path() {
        let frames = FeatureFrameSeq::new(vec![1.0; 32], 16, 12.5).unwrap();
        let mut bytes = encode_frames(&frames).unwrap();
        assert_eq!(&bytes[..4], b"SFR1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        bytes.pop();
        let err = decode_frames(&bytes, Path::new("x/y.sfr"), 12.5).unwrap_err().to_string();
        assert!(err.contains("x/y.sfr"), "{err}");
    }

    #[test]
    fn split_is_roughly_the_requested_fraction() {
        let cfg = small(0);
        let held = (0..10000)
            .filter(|&i| split_of(&cfg, &utterance_id(i)) == Split::Heldout)
            .count();
        assert!((800..1200).contains(&held), "{held}");
    }
}
