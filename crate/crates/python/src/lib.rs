//! Python bindings over the `speechlm` core: token layout, codec, scoring,
//! schedule, judge prompt and artifact verification.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use speechlm::codec::{RvqCodec, TokenGrid};
use speechlm::corpus::{build_language, generate_utterance, CorpusConfig, FeatureFrameSeq};
use speechlm::model::{score, LmCheckpoint, LmParams, ScoreMask};
use speechlm::tokens::UnifiedVocab;
use speechlm::train::WsdSchedule;

fn py_err(e: speechlm::Error) -> PyErr {
    match e {
        speechlm::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn vocab(text_size: u32, levels: u32, codebook_size: u32) -> PyResult<UnifiedVocab> {
    UnifiedVocab::new(text_size, levels, codebook_size).map_err(py_err)
}

fn grid_from_rows(rows: Vec<Vec<u16>>) -> PyResult<TokenGrid> {
    TokenGrid::from_rows(&rows).map_err(py_err)
}

fn frames_from_rows(rows: &[Vec<f32>], frame_rate_hz: f64) -> PyResult<FeatureFrameSeq> {
    let dim = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("frames must all have the same dimension"));
    }
    FeatureFrameSeq::new(rows.concat(), dim, frame_rate_hz).map_err(py_err)
}

fn frames_to_rows(f: &FeatureFrameSeq) -> Vec<Vec<f32>> {
    f.frames().map(|x| x.to_vec()).collect()
}

/// Flattens a `levels × frames` code grid into `<audio> ... </audio>` ids.
#[pyfunction]
fn interleave(grid: Vec<Vec<u16>>, text_size: u32, codebook_size: u32) -> PyResult<Vec<u32>> {
    let g = grid_from_rows(grid)?;
    let v = vocab(text_size, g.levels() as u32, codebook_size)?;
    speechlm::tokens::interleave(&v, &g).map_err(py_err)
}

#[pyfunction]
fn deinterleave(ids: Vec<u32>, text_size: u32, levels: u32, codebook_size: u32) -> PyResult<Vec<Vec<u16>>> {
    let v = vocab(text_size, levels, codebook_size)?;
    Ok(speechlm::tokens::deinterleave(&v, &ids).map_err(py_err)?.rows())
}

/// `(violation_count, well_formed)` of a sequence against the level cycle.
#[pyfunction]
fn order_violations(ids: Vec<u32>, text_size: u32, levels: u32, codebook_size: u32) -> PyResult<(usize, bool)> {
    let v = vocab(text_size, levels, codebook_size)?;
    let r = speechlm::tokens::validate_order(&v, &ids);
    Ok((r.violation_count, r.well_formed))
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, warmup_steps, peak_lr=3e-4, end_lr=3e-5, stable_fraction=0.8))]
fn lr_at(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    peak_lr: f64,
    end_lr: f64,
    stable_fraction: f64,
) -> PyResult<f64> {
    let s = WsdSchedule {
        total_steps,
        warmup_steps,
        peak_lr,
        end_lr,
        stable_fraction,
    };
    s.validate().map_err(py_err)?;
    s.lr_at(step).map_err(py_err)
}

#[pyfunction]
fn judge_prompt(prefix: &str, suffix: &str) -> String {
    speechlm::judge::render_judge_prompt(prefix, suffix)
}

#[pyfunction]
fn parse_judge_score(raw: &str) -> PyResult<u8> {
    speechlm::judge::parse_score(raw).map_err(py_err)
}

/// Renders utterance `index` of the synthetic world built from `seed`.
/// Returns `(words, frames, speaker_id)`.
#[pyfunction]
#[pyo3(signature = (index, seed=0, max_frames=250))]
fn synth_utterance(index: usize, seed: u64, max_frames: usize) -> PyResult<(Vec<u32>, Vec<Vec<f32>>, usize)> {
    let config = CorpusConfig {
        seed,
        max_frames,
        ..Default::default()
    };
    let lang = build_language(&config).map_err(py_err)?;
    let u = generate_utterance(&lang, index).map_err(py_err)?;
    Ok((u.words.clone(), frames_to_rows(&u.frames), u.factors.speaker_id))
}

/// Verifies every manifest under an artifact root and returns the report as
/// a JSON string. Nothing is written.
#[pyfunction]
fn verify_root(root: PathBuf) -> PyResult<String> {
    let r = speechlm::experiment::build_report(&root).map_err(py_err)?;
    serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(frozen)]
struct Codec {
    inner: RvqCodec,
}

#[pymethods]
impl Codec {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Codec {
            inner: RvqCodec::load(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn levels(&self) -> usize {
        self.inner.levels()
    }

    #[getter]
    fn codebook_size(&self) -> usize {
        self.inner.codebook_size()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Codes as `levels` rows of `frames` entries.
    fn encode(&self, frames: Vec<Vec<f32>>) -> PyResult<Vec<Vec<u16>>> {
        let f = frames_from_rows(&frames, 12.5)?;
        Ok(self.inner.encode(&f).map_err(py_err)?.rows())
    }

    fn decode(&self, codes: Vec<Vec<u16>>) -> PyResult<Vec<Vec<f32>>> {
        let g = grid_from_rows(codes)?;
        Ok(frames_to_rows(&self.inner.decode(&g, 12.5).map_err(py_err)?))
    }

    #[pyo3(signature = (frames, levels_used=None))]
    fn recon_mse(&self, frames: Vec<Vec<f32>>, levels_used: Option<usize>) -> PyResult<f64> {
        let f = frames_from_rows(&frames, 12.5)?;
        self.inner
            .recon_mse(&f, levels_used.unwrap_or(self.inner.levels()))
            .map_err(py_err)
    }
}

#[pyclass(frozen)]
struct Model {
    params: LmParams<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            params: LmCheckpoint::load(&path).map_err(py_err)?.params,
        })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    /// Summed log-likelihood of `ids`. `mask="semantic_only"` needs the
    /// audio layout (`text_size`, `levels`, `codebook_size`).
    #[pyo3(signature = (ids, mask="all", text_size=None, levels=None, codebook_size=None))]
    fn score(
        &self,
        ids: Vec<u32>,
        mask: &str,
        text_size: Option<u32>,
        levels: Option<u32>,
        codebook_size: Option<u32>,
    ) -> PyResult<f64> {
        let m = match mask {
            "all" => ScoreMask::All,
            "semantic_only" => ScoreMask::SemanticOnly,
            other => return Err(PyValueError::new_err(format!("unknown mask `{other}`"))),
        };
        let v = match (text_size, levels, codebook_size) {
            (Some(t), Some(q), Some(k)) => Some(vocab(t, q, k)?),
            (None, None, None) => None,
            _ => return Err(PyValueError::new_err("give all of text_size, levels, codebook_size or none")),
        };
        Ok(score(&self.params, &ids, &m, v.as_ref()).map_err(py_err)?.total)
    }
}

#[pymodule]
fn speechlm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(interleave, m)?)?;
    m.add_function(wrap_pyfunction!(deinterleave, m)?)?;
    m.add_function(wrap_pyfunction!(order_violations, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(judge_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_judge_score, m)?)?;
    m.add_function(wrap_pyfunction!(synth_utterance, m)?)?;
    m.add_function(wrap_pyfunction!(verify_root, m)?)?;
    m.add_class::<Codec>()?;
    m.add_class::<Model>()?;
    Ok(())
}
