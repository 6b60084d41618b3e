//! Residual vector quantizer with a semantic first level.
//!
//! Level 0 picks its code by distance in the semantic subspace; deeper levels
//! quantize the running residual in the full space. Code 0 is the zero vector
//! at every level, so a deeper level never increases the residual norm.

mod grid;
mod kmeans;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, LeReader, LeWriter};
use crate::corpus::FeatureFrameSeq;
use crate::error::{Error, Result};
use crate::rng::{rng_for, TAG_KMEANS};

pub use grid::TokenGrid;
use kmeans::{lloyd, nearest, seed_plus_plus, sq_dist};

const MAGIC: &[u8; 4] = b"RVQ1";
pub const CODEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub iters: usize,
    pub seed: u64,
    /// Fit on a seeded subsample of at most this many frames (0 = all).
    pub max_fit_frames: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            levels: 4,
            codebook_size: 64,
            iters: 50,
            seed: 0,
            max_fit_frames: 60_000,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("levels", "must be >= 1"));
        }
        if !(2..=65536).contains(&self.codebook_size) {
            return Err(Error::config("codebook_size", "must be in 2..=65536"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqCodec {
    levels: usize,
    codebook_size: usize,
    dim: usize,
    semantic_dim: usize,
    /// `semantic_dim × dim`, orthonormal rows.
    projection: Vec<f32>,
    /// `levels × codebook_size × dim`.
    codebooks: Vec<f32>,
}

/// Per-frame semantic teacher labels (phoneme ids) for level-0 initialization.
pub type Teacher<'a> = &'a [u32];

/// Projection onto the first `semantic_dim` coordinate axes.
pub fn axis_projection(semantic_dim: usize, dim: usize) -> Vec<f32> {
    let mut p = vec![0.0f32; semantic_dim * dim];
    for i in 0..semantic_dim {
        p[i * dim + i] = 1.0;
    }
    p
}

fn count_distinct(frames: &[f32], dim: usize, stop_at: usize) -> usize {
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for f in frames.chunks_exact(dim) {
        seen.insert(f.iter().map(|x| x.to_bits()).collect());
        if seen.len() >= stop_at {
            break;
        }
    }
    seen.len()
}

impl RvqCodec {
    pub fn from_parts(
        levels: usize,
        codebook_size: usize,
        dim: usize,
        semantic_dim: usize,
        projection: Vec<f32>,
        codebooks: Vec<f32>,
    ) -> Result<Self> {
        if levels == 0 || codebook_size < 2 || dim == 0 || semantic_dim == 0 || semantic_dim > dim {
            return Err(Error::config(
                "codec shape",
                format!("Q={levels} K={codebook_size} D={dim} D_s={semantic_dim}"),
            ));
        }
        if projection.len() != semantic_dim * dim {
            return Err(Error::Dimension {
                what: "semantic projection".into(),
                expected: semantic_dim * dim,
                got: projection.len(),
            });
        }
        if codebooks.len() != levels * codebook_size * dim {
            return Err(Error::Dimension {
                what: "codebooks".into(),
                expected: levels * codebook_size * dim,
                got: codebooks.len(),
            });
        }
        let codec = RvqCodec {
            levels,
            codebook_size,
            dim,
            semantic_dim,
            projection,
            codebooks,
        };
        if codec.max_projection_error() > 1e-6 {
            return Err(Error::config("semantic projection", "rows are not orthonormal"));
        }
        for q in 0..levels {
            if codec.centroid(q, 0).iter().any(|&x| x != 0.0) {
                return Err(Error::config("codebooks", format!("code 0 of level {} is not zero", q + 1)));
            }
        }
        Ok(codec)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic_dim
    }

    pub fn projection(&self) -> &[f32] {
        &self.projection
    }

    pub fn centroid(&self, level: usize, code: usize) -> &[f32] {
        let start = (level * self.codebook_size + code) * self.dim;
        &self.codebooks[start..start + self.dim]
    }

    /// Largest deviation of `P Pᵀ` from the identity.
    pub fn max_projection_error(&self) -> f64 {
        let (s, d) = (self.semantic_dim, self.dim);
        let mut worst = 0.0f64;
        for i in 0..s {
            for j in 0..s {
                let dot: f64 = (0..d)
                    .map(|k| self.projection[i * d + k] as f64 * self.projection[j * d + k] as f64)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    fn project(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.projection[i * self.dim..(i + 1) * self.dim];
            *o = row.iter().zip(x).map(|(&p, &v)| p as f64 * v).sum();
        }
    }

    fn level_f64(&self, level: usize) -> Vec<f64> {
        let k = self.codebook_size * self.dim;
        self.codebooks[level * k..(level + 1) * k].iter().map(|&x| x as f64).collect()
    }

    fn projected_level0(&self) -> Vec<f64> {
        let cb = self.level_f64(0);
        let mut out = vec![0.0; self.codebook_size * self.semantic_dim];
        for (c, o) in cb.chunks_exact(self.dim).zip(out.chunks_exact_mut(self.semantic_dim)) {
            self.project(c, o);
        }
        out
    }

    fn check_dim(&self, frames: &FeatureFrameSeq) -> Result<()> {
        if frames.dim != self.dim {
            return Err(Error::Dimension {
                what: "frame dimension".into(),
                expected: self.dim,
                got: frames.dim,
            });
        }
        Ok(())
    }

    /// Encodes every frame; when `residual_sq` is given it receives the
    /// squared residual norm after each level (`levels + 1` values per frame,
    /// the first being the frame norm).
    pub fn encode_with_residuals(
        &self,
        frames: &FeatureFrameSeq,
        mut residual_sq: Option<&mut Vec<f64>>,
    ) -> Result<TokenGrid> {
        self.check_dim(frames)?;
        let n = frames.len();
        let sem = self.projected_level0();
        let books: Vec<Vec<f64>> = (0..self.levels).map(|q| self.level_f64(q)).collect();
        let mut grid = TokenGrid::zeros(self.levels, n);
        let mut r = vec![0.0f64; self.dim];
        let mut pr = vec![0.0f64; self.semantic_dim];
        let zero = vec![0.0f64; self.dim];
        if let Some(out) = residual_sq.as_deref_mut() {
            out.clear();
            out.reserve(n * (self.levels + 1));
        }
        for t in 0..n {
            for (ri, &x) in r.iter_mut().zip(frames.frame(t)) {
                *ri = x as f64;
            }
            if let Some(out) = residual_sq.as_deref_mut() {
                out.push(sq_dist(&r, &zero));
            }
            for q in 0..self.levels {
                let code = if q == 0 {
                    self.project(&r, &mut pr);
                    nearest(&pr, &sem, self.semantic_dim).0
                } else {
                    nearest(&r, &books[q], self.dim).0
                };
                let c = &books[q][code * self.dim..(code + 1) * self.dim];
                for (ri, ci) in r.iter_mut().zip(c) {
                    *ri -= ci;
                }
                if let Some(out) = residual_sq.as_deref_mut() {
                    out.push(sq_dist(&r, &zero));
                }
                grid.set(q, t, code as u16);
            }
        }
        Ok(grid)
    }

    pub fn encode(&self, frames: &FeatureFrameSeq) -> Result<TokenGrid> {
        self.encode_with_residuals(frames, None)
    }

    /// Sums the selected centroids of every level present in the grid.
    pub fn decode(&self, grid: &TokenGrid, frame_rate_hz: f64) -> Result<FeatureFrameSeq> {
        if grid.levels() > self.levels {
            return Err(Error::range(
                "grid levels",
                format!("{} > codec levels {}", grid.levels(), self.levels),
            ));
        }
        if let Some(max) = grid.max_code() {
            if max as usize >= self.codebook_size {
                return Err(Error::range("code", format!("{max} >= K={}", self.codebook_size)));
            }
        }
        let mut out = Vec::with_capacity(grid.frames() * self.dim);
        let mut acc = vec![0.0f64; self.dim];
        for t in 0..grid.frames() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for q in 0..grid.levels() {
                let c = self.centroid(q, grid.code(q, t) as usize);
                for (a, &x) in acc.iter_mut().zip(c) {
                    *a += x as f64;
                }
            }
            out.extend(acc.iter().map(|&a| a as f32));
        }
        FeatureFrameSeq::new(out, self.dim, frame_rate_hz)
    }

    /// Mean squared error per element of the decode that uses the first
    /// `levels_used` levels. Errors are taken from the running residual, so
    /// per-frame errors never increase with more levels.
    pub fn recon_mse(&self, frames: &FeatureFrameSeq, levels_used: usize) -> Result<f64> {
        if levels_used == 0 || levels_used > self.levels {
            return Err(Error::range(
                "levels_used",
                format!("{levels_used} not in 1..={}", self.levels),
            ));
        }
        if frames.is_empty() {
            return Err(Error::Empty("no frames to reconstruct".into()));
        }
        let mut res = Vec::new();
        self.encode_with_residuals(frames, Some(&mut res))?;
        let stride = self.levels + 1;
        let total: f64 = res.chunks_exact(stride).map(|r| r[levels_used]).sum();
        Ok(total / (frames.len() * self.dim) as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::new();
        w.bytes(MAGIC)
            .u32(CODEC_VERSION)
            .u32(self.levels as u32)
            .u32(self.codebook_size as u32)
            .u32(self.dim as u32)
            .u32(self.semantic_dim as u32)
            .f32s(self.projection.iter().copied())
            .f32s(self.codebooks.iter().copied());
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = LeReader::new(bytes, path);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != CODEC_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let q = r.u32()? as usize;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let s = r.u32()? as usize;
        let expected = (s * d + q * k * d) * 4;
        if r.remaining() != expected {
            return Err(r.error(format!(
                "payload holds {} bytes, header Q={q} K={k} D={d} D_s={s} needs {expected}",
                r.remaining()
            )));
        }
        let projection = r.f32s(s * d)?;
        let codebooks = r.f32s(q * k * d)?;
        r.finish()?;
        RvqCodec::from_parts(q, k, d, s, projection, codebooks).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// A codec keeping only the first `levels` levels.
    pub fn truncated(&self, levels: usize) -> Result<Self> {
        if levels == 0 || levels > self.levels {
            return Err(Error::range("levels", format!("{levels} not in 1..={}", self.levels)));
        }
        let mut c = self.clone();
        c.levels = levels;
        c.codebooks.truncate(levels * self.codebook_size * self.dim);
        Ok(c)
    }
}

/// Fits the codec on `frames` (row-major, `dim` wide). Level 0 runs k-means
/// on the semantic projection, starting from per-label means of `teacher`;
/// its centroids are then the full-space means of their clusters. Deeper
/// levels run k-means on the running residuals. Codes 1..K are fitted,
/// code 0 stays zero.
pub fn fit_codec(
    frames: &[f32],
    dim: usize,
    semantic_dim: usize,
    teacher: Option<Teacher<'_>>,
    config: &CodecConfig,
) -> Result<RvqCodec> {
    config.validate()?;
    if dim == 0 || semantic_dim == 0 || semantic_dim > dim {
        return Err(Error::config("semantic_dim", format!("{semantic_dim} with D={dim}")));
    }
    if !frames.len().is_multiple_of(dim) {
        return Err(Error::Dimension {
            what: "frame buffer".into(),
            expected: dim,
            got: frames.len() % dim,
        });
    }
    let n_all = frames.len() / dim;
    if n_all == 0 {
        return Err(Error::Empty("no training frames".into()));
    }
    if let Some(t) = teacher {
        if t.len() != n_all {
            return Err(Error::Dimension {
                what: "teacher labels".into(),
                expected: n_all,
                got: t.len(),
            });
        }
    }
    let k = config.codebook_size;
    let clusters = k - 1;
    let distinct = count_distinct(frames, dim, clusters);
    if distinct < clusters {
        return Err(Error::Fit(format!(
            "{clusters} nonzero codes requested but only {distinct} distinct training frames"
        )));
    }

    let mut rng = rng_for(config.seed, &[TAG_KMEANS]);
    let rows: Vec<usize> = if config.max_fit_frames > 0 && n_all > config.max_fit_frames {
        let mut idx = sample(&mut rng, n_all, config.max_fit_frames).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n_all).collect()
    };
    let n = rows.len();
    let mut residual: Vec<f64> = Vec::with_capacity(n * dim);
    for &i in &rows {
        residual.extend(frames[i * dim..(i + 1) * dim].iter().map(|&x| x as f64));
    }

    let projection = axis_projection(semantic_dim, dim);
    let project = |x: &[f64], out: &mut Vec<f64>| {
        for i in 0..semantic_dim {
            let row = &projection[i * dim..(i + 1) * dim];
            out.push(row.iter().zip(x).map(|(&p, &v)| p as f64 * v).sum());
        }
    };
    let mut codebooks = vec![0.0f32; config.levels * k * dim];

    // level 0: semantic subspace
    let mut sem = Vec::with_capacity(n * semantic_dim);
    for x in residual.chunks_exact(dim) {
        project(x, &mut sem);
    }
    let mut cent = vec![0.0f64; clusters * semantic_dim];
    let mut filled = 0;
    if let Some(labels) = teacher {
        let mut by_label: std::collections::BTreeMap<u32, (Vec<f64>, usize)> = Default::default();
        for (&i, p) in rows.iter().zip(sem.chunks_exact(semantic_dim)) {
            let e = by_label
                .entry(labels[i])
                .or_insert_with(|| (vec![0.0; semantic_dim], 0));
            e.0.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
        for (sum, count) in by_label.values().take(clusters) {
            for (c, s) in cent[filled * semantic_dim..(filled + 1) * semantic_dim].iter_mut().zip(sum) {
                *c = s / *count as f64;
            }
            filled += 1;
        }
    }
    seed_plus_plus(&sem, semantic_dim, &mut cent, filled, &mut rng);
    let assign = lloyd(&sem, semantic_dim, &mut cent, config.iters);
    let mut sums = vec![0.0f64; clusters * dim];
    let mut counts = vec![0usize; clusters];
    for (x, &a) in residual.chunks_exact(dim).zip(&assign) {
        counts[a] += 1;
        sums[a * dim..(a + 1) * dim].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    let level0 = &mut codebooks[dim..k * dim];
    for j in 0..clusters {
        let row = &mut level0[j * dim..(j + 1) * dim];
        if counts[j] > 0 {
            for (r, s) in row.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                *r = (s / counts[j] as f64) as f32;
            }
        } else {
            // unused cluster: lift its semantic centroid back into frame space
            for i in 0..semantic_dim {
                let c = cent[j * semantic_dim + i];
                for (r, &p) in row.iter_mut().zip(&projection[i * dim..(i + 1) * dim]) {
                    *r += (c * p as f64) as f32;
                }
            }
        }
    }

    let mut codec = RvqCodec {
        levels: config.levels,
        codebook_size: k,
        dim,
        semantic_dim,
        projection: projection.clone(),
        codebooks,
    };

    // running residuals use the encoder's own choices
    let sem_cent = codec.projected_level0();
    let book0 = codec.level_f64(0);
    let mut pr = Vec::with_capacity(semantic_dim);
    for x in residual.chunks_exact_mut(dim) {
        pr.clear();
        project(x, &mut pr);
        let code = nearest(&pr, &sem_cent, semantic_dim).0;
        x.iter_mut().zip(&book0[code * dim..(code + 1) * dim]).for_each(|(v, c)| *v -= c);
    }

    for q in 1..config.levels {
        let mut cent = vec![0.0f64; clusters * dim];
        seed_plus_plus(&residual, dim, &mut cent, 0, &mut rng);
        lloyd(&residual, dim, &mut cent, config.iters);
        let start = (q * k + 1) * dim;
        for (dst, &c) in codec.codebooks[start..start + clusters * dim].iter_mut().zip(&cent) {
            *dst = c as f32;
        }
        let book = codec.level_f64(q);
        for x in residual.chunks_exact_mut(dim) {
            let code = nearest(x, &book, dim).0;
            x.iter_mut().zip(&book[code * dim..(code + 1) * dim]).for_each(|(v, c)| *v -= c);
        }
    }
    Ok(codec)
}
