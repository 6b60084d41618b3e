//! Generation-quality scoring: oracle transcription of token grids, an
//! LLM judge over a chat-completion endpoint with a content-addressed cache,
//! and transcript perplexity under the local text model.

use std::path::{Path, PathBuf};
use std::thread::sleep;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::codec::{RvqCodec, TokenGrid};
use crate::corpus::{Language, PhonemeId, WordId};
use crate::error::{Error, Result};
use crate::model::{score, LmParams, ScoreMask};

/// Judge instructions; `{prefix}` and `{suffix}` are the only placeholders.
pub const JUDGE_TEMPLATE: &str = "Given the following prompt and completion, rate the quality of the completion on a scale from 1 to 10, where 10 is the best possible completion. Consider relevance, coherence, fluency, and informativeness. Output only the score as an integer.\nPrompt: {prefix}\nCompletion: {suffix}";

pub const TEMPLATE_ID: &str = "judge-v1";

/// Fills the template in one left-to-right pass, so placeholder-like text
/// inside the substitutions is copied literally.
pub fn render_judge_prompt(prefix: &str, suffix: &str) -> String {
    let mut out = String::with_capacity(JUDGE_TEMPLATE.len() + prefix.len() + suffix.len());
    let mut rest = JUDGE_TEMPLATE;
    while let Some(i) = rest.find('{') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if let Some(t) = tail.strip_prefix("{prefix}") {
            out.push_str(prefix);
            rest = t;
        } else if let Some(t) = tail.strip_prefix("{suffix}") {
            out.push_str(suffix);
            rest = t;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

/// Integer in 1..=10 with nothing but surrounding whitespace.
pub fn parse_score(raw: &str) -> Result<u8> {
    let t = raw.trim();
    let digits = t.strip_prefix('+').unwrap_or(t);
    let body = digits.strip_prefix('-').unwrap_or(digits);
    if body.is_empty() || !body.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::JudgeParse { raw: raw.to_string() });
    }
    let v: i64 = digits.parse().unwrap_or(i64::MAX);
    if !(1..=10).contains(&v) {
        return Err(Error::JudgeRange {
            score: v,
            raw: raw.to_string(),
        });
    }
    Ok(v as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub prefix_text: String,
    pub suffix_text: String,
    pub model: String,
    pub temperature: f64,
    pub template_id: String,
}

impl JudgeRequest {
    pub fn new(prefix: &str, suffix: &str, model: &str) -> Self {
        JudgeRequest {
            prefix_text: prefix.to_string(),
            suffix_text: suffix.to_string(),
            model: model.to_string(),
            temperature: 0.0,
            template_id: TEMPLATE_ID.to_string(),
        }
    }

    pub fn prompt(&self) -> String {
        render_judge_prompt(&self.prefix_text, &self.suffix_text)
    }

    /// Cache key over prompt bytes, model name and temperature.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.prompt().as_bytes());
        h.update([0]);
        h.update(self.model.as_bytes());
        h.update([0]);
        h.update(self.temperature.to_bits().to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn body(&self) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": self.prompt()}],
            "temperature": self.temperature,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub score: u8,
    pub raw: String,
    pub digest: String,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    /// Full URL of the chat-completion endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub cache_dir: Option<PathBuf>,
}

impl JudgeConfig {
    pub fn new(endpoint: &str, model: &str) -> Self {
        JudgeConfig {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: None,
            max_retries: 3,
            backoff_ms: 200,
            timeout_secs: 60,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    digest: String,
    model: String,
    prompt: String,
    raw: String,
}

pub struct JudgeClient {
    config: JudgeConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fail(String),
}

impl JudgeClient {
    pub fn new(config: JudgeConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        JudgeClient { config, agent }
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.config
    }

    fn cache_path(&self, digest: &str) -> Option<PathBuf> {
        self.config.cache_dir.as_ref().map(|d| d.join(format!("{digest}.json")))
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(format!("HTTP {status}: {text}"));
        }
        if status >= 400 {
            return Attempt::Fail(format!("HTTP {status}: {text}"));
        }
        let v: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => return Attempt::Fail(format!("unreadable response ({e}): {text}")),
        };
        match v.pointer("/choices/0/message/content").and_then(Value::as_str) {
            Some(c) => Attempt::Done(c.to_string()),
            None => Attempt::Fail(format!("response has no choices[0].message.content: {text}")),
        }
    }

    pub fn judge(&self, request: &JudgeRequest) -> Result<JudgeScore> {
        if request.temperature != 0.0 {
            return Err(Error::config("judge.temperature", "must be 0"));
        }
        let digest = request.digest();
        if let Some(path) = self.cache_path(&digest) {
            if path.exists() {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let entry: CacheEntry =
                    serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
                if entry.digest != digest {
                    return Err(Error::format(&path, "cache entry digest does not match its name"));
                }
                return Ok(JudgeScore {
                    score: parse_score(&entry.raw)?,
                    raw: entry.raw,
                    digest,
                    cached: true,
                });
            }
        }
        let body = request.body();
        let mut last = String::new();
        let mut raw = None;
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1).min(6)));
            }
            match self.attempt(&body) {
                Attempt::Done(c) => {
                    raw = Some(c);
                    break;
                }
                Attempt::Retry(e) => last = e,
                Attempt::Fail(e) => return Err(Error::Judge(e)),
            }
        }
        let raw = raw.ok_or_else(|| {
            Error::Judge(format!("{} failed after {} retries: {last}", self.config.endpoint, self.config.max_retries))
        })?;
        let score = parse_score(&raw)?;
        if let Some(path) = self.cache_path(&digest) {
            let entry = CacheEntry {
                digest: digest.clone(),
                model: request.model.clone(),
                prompt: request.prompt(),
                raw: raw.clone(),
            };
            crate::binio::write_file(&path, &serde_json::to_vec_pretty(&entry)?)?;
        }
        Ok(JudgeScore {
            score,
            raw,
            digest,
            cached: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub words: Vec<WordId>,
    pub phonemes: Vec<PhonemeId>,
    pub text: String,
}

fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Splits a phoneme string into lexicon words with the fewest total edits.
/// Segments range over the lexicon's word lengths; ties go to fewer words,
/// then to lower word ids.
pub fn segment_words(lang: &Language, phonemes: &[PhonemeId]) -> Vec<WordId> {
    let n = phonemes.len();
    if n == 0 {
        return Vec::new();
    }
    let lo = lang.config.word_len_min.max(1);
    let hi = lang.config.word_len_max;
    // best[i]: (edits, words) for the prefix of length i
    let mut best: Vec<Option<(usize, usize, usize, WordId)>> = vec![None; n + 1];
    best[0] = Some((0, 0, 0, 0));
    for end in 1..=n {
        for len in 1..=hi.min(end) {
            let start = end - len;
            let Some((edits, count, _, _)) = best[start] else { continue };
            let seg = &phonemes[start..end];
            let (word, cost) = match lang.lookup(seg) {
                Some(w) => (w, 0),
                None => {
                    let mut pick = (0, usize::MAX);
                    for w in &lang.words {
                        let c = edit_distance(seg, &w.phonemes);
                        if c < pick.1 {
                            pick = (w.id, c);
                        }
                    }
                    pick
                }
            };
            // too-short fragments pay their missing phonemes
            let cost = cost + lo.saturating_sub(len);
            let cand = (edits + cost, count + 1, start, word);
            let better = match best[end] {
                None => true,
                Some(b) => (cand.0, cand.1) < (b.0, b.1),
            };
            if better {
                best[end] = Some(cand);
            }
        }
    }
    let mut words = Vec::new();
    let mut end = n;
    while end > 0 {
        let (_, _, start, w) = best[end].expect("every prefix is reachable with length-1 segments");
        words.push(w);
        end = start;
    }
    words.reverse();
    words
}

/// Oracle transcription: level-1 codes to the nearest phoneme template in the
/// semantic projection, collapse repeats, segment against the lexicon.
/// Frames farther than half the template spacing from every phoneme (zero
/// codes, blends) produce no phoneme.
pub fn transcribe(codec: &RvqCodec, lang: &Language, grid: &TokenGrid) -> Result<Transcript> {
    if grid.frames() == 0 || grid.levels() == 0 {
        return Err(Error::Empty("transcription of an empty grid".into()));
    }
    let (d, ds) = (codec.dim(), codec.semantic_dim());
    if d != lang.config.dim {
        return Err(Error::Dimension {
            what: "codec dim vs language dim".into(),
            expected: lang.config.dim,
            got: d,
        });
    }
    let proj = codec.projection();
    let project = |x: &[f64]| -> Vec<f64> {
        (0..ds)
            .map(|r| (0..d).map(|c| proj[r * d + c] as f64 * x[c]).sum())
            .collect()
    };
    let templates: Vec<Vec<f64>> = lang.phonemes.iter().map(|p| project(&p.base)).collect();
    // per level-1 code: matched phoneme or none
    let k = codec.codebook_size();
    let threshold = 0.5;
    let code_phoneme: Vec<Option<PhonemeId>> = (0..k)
        .map(|code| {
            let c: Vec<f64> = codec.centroid(0, code).iter().map(|&x| x as f64).collect();
            let z = project(&c);
            let (best, dist) = templates
                .iter()
                .enumerate()
                .map(|(i, t)| (i, t.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            (dist < threshold).then_some(best as PhonemeId)
        })
        .collect();
    let mut phonemes: Vec<PhonemeId> = Vec::new();
    for &code in grid.row(0) {
        // unmatched frames (blends, silence) neither emit nor split a run
        if let Some(ph) = code_phoneme[code as usize] {
            if phonemes.last() != Some(&ph) {
                phonemes.push(ph);
            }
        }
    }
    let words = segment_words(lang, &phonemes);
    Ok(Transcript {
        text: lang.spell(&words),
        words,
        phonemes,
    })
}

/// Word error count by edit distance over word ids.
pub fn word_errors(reference: &[WordId], hypothesis: &[WordId]) -> usize {
    edit_distance(reference, hypothesis)
}

/// `exp` of the mean next-word negative log-likelihood under a text model.
pub fn transcript_perplexity(text_lm: &LmParams<f32>, words: &[WordId]) -> Result<f64> {
    if words.len() < 2 {
        return Err(Error::Empty("transcript needs at least 2 words to predict".into()));
    }
    if let Some(&w) = words.iter().find(|&&w| w as usize >= text_lm.config.vocab_size) {
        return Err(Error::range("word", format!("id {w} outside the text vocabulary")));
    }
    let s = score(text_lm, words, &ScoreMask::All, None)?;
    Ok(s.perplexity().expect("nonempty"))
}

/// Parses space-separated spellings, then scores them.
pub fn text_perplexity(text_lm: &LmParams<f32>, lang: &Language, text: &str) -> Result<f64> {
    transcript_perplexity(text_lm, &lang.parse_words(text)?)
}

/// Reads the judge credential from the environment.
pub fn api_key_from_env(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|v| !v.is_empty())
}

pub fn default_cache_dir(artifact_root: &Path) -> PathBuf {
    artifact_root.join("judge_cache")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, LmConfig};

    #[test]
    fn prompt_substitution_is_single_pass() {
        let p = render_judge_prompt("{suffix}", "{prefix} {x}");
        assert!(p.ends_with("\nPrompt: {suffix}\nCompletion: {prefix} {x}"));
        let empty = render_judge_prompt("a", "");
        assert!(empty.ends_with("Prompt: a\nCompletion: "));
        assert_eq!(empty.lines().count(), 3);
    }

    #[test]
    fn strict_score_parsing() {
        assert_eq!(parse_score("7").unwrap(), 7);
        assert_eq!(parse_score(" 10\n").unwrap(), 10);
        assert!(matches!(parse_score("seven"), Err(Error::JudgeParse { .. })));
        assert!(matches!(parse_score("Score: 7"), Err(Error::JudgeParse { .. })));
        assert!(matches!(parse_score("7.0"), Err(Error::JudgeParse { .. })));
        assert!(matches!(parse_score("11"), Err(Error::JudgeRange { score: 11, .. })));
        assert!(matches!(parse_score("0"), Err(Error::JudgeRange { .. })));
        assert!(matches!(parse_score("-3"), Err(Error::JudgeRange { score: -3, .. })));
        assert!(matches!(parse_score(""), Err(Error::JudgeParse { .. })));
    }

    #[test]
    fn digest_covers_model_and_prompt() {
        let a = JudgeRequest::new("p", "s", "m1");
        assert_eq!(a.digest(), JudgeRequest::new("p", "s", "m1").digest());
        assert_ne!(a.digest(), JudgeRequest::new("p", "s", "m2").digest());
        assert_ne!(a.digest(), JudgeRequest::new("p", "t", "m1").digest());
        assert_eq!(a.body()["temperature"], 0.0);
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[4, 5]), 2);
    }

    #[test]
    fn uniform_text_model_perplexity_is_vocab_size() {
        let mut p: LmParams<f32> = init_model(&LmConfig {
            vocab_size: 12,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            ..Default::default()
        })
        .unwrap();
        let head = p.layout.get("head").unwrap().range();
        p.data[head].iter_mut().for_each(|x| *x = 0.0);
        let ppl = transcript_perplexity(&p, &[1, 5, 3, 11]).unwrap();
        assert!((ppl - 12.0).abs() < 1e-6 * 12.0);
        assert!(transcript_perplexity(&p, &[1]).is_err());
        assert!(transcript_perplexity(&p, &[1, 12]).is_err());
    }
}
