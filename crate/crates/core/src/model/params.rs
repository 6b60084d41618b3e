use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Float;
use crate::rng::{rng_for, TAG_EXTEND, TAG_INIT};
use crate::tokens::UnifiedVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub init_std: f64,
    pub seed: u64,
    /// Text vocabulary size the model was extended from, once extended.
    pub extended_from: Option<usize>,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 1024,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
            init_std: 0.02,
            seed: 0,
            extended_from: None,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config("d_model", "must be divisible by n_heads"));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(Error::config("d_model", "head dimension must be even for rotary positions"));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::config("vocab_size", "exceeds 32-bit ids"));
        }
        if !(self.rope_theta > 0.0 && self.norm_eps > 0.0 && self.init_std > 0.0) {
            return Err(Error::config("rope_theta/norm_eps/init_std", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Offsets of every tensor for one config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tensors: Vec<Tensor>,
    pub total: usize,
    pub tok_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub final_norm: usize,
    pub head: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

impl ParamLayout {
    pub fn new(c: &LmConfig) -> Self {
        let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff);
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let t = Tensor { name, shape, offset: total };
            total += t.len();
            let off = t.offset;
            tensors.push(t);
            off
        };
        let tok_emb = add("tok_emb".into(), vec![v, d]);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            layers.push(LayerOffsets {
                attn_norm: add(p("attn_norm"), vec![d]),
                wq: add(p("wq"), vec![d, d]),
                wk: add(p("wk"), vec![d, d]),
                wv: add(p("wv"), vec![d, d]),
                wo: add(p("wo"), vec![d, d]),
                mlp_norm: add(p("mlp_norm"), vec![d]),
                w_gate: add(p("w_gate"), vec![d, f]),
                w_up: add(p("w_up"), vec![d, f]),
                w_down: add(p("w_down"), vec![f, d]),
            });
        }
        let final_norm = add("final_norm".into(), vec![d]);
        // output embeddings stored one row per token, like tok_emb
        let head = add("head".into(), vec![v, d]);
        ParamLayout {
            tensors,
            total,
            tok_emb,
            layers,
            final_norm,
            head,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Decoder parameters in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<T: Float> {
    pub config: LmConfig,
    pub layout: ParamLayout,
    pub data: Vec<T>,
}

impl<T: Float> LmParams<T> {
    pub fn from_data(config: LmConfig, data: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Dimension {
                what: "parameter buffer".into(),
                expected: layout.total,
                got: data.len(),
            });
        }
        Ok(LmParams { config, layout, data })
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|t| &self.data[t.range()])
    }

    pub fn cast<U: Float>(&self) -> LmParams<U> {
        LmParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|&x| U::from_f64c(x.to_f64c())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Seeded init: normal(0, init_std) for matrices and embeddings, with the
/// residual output projections further scaled by `1/sqrt(2·n_layers)`;
/// norm gains start at one.
pub fn init_model<T: Float>(config: &LmConfig) -> Result<LmParams<T>> {
    config.validate()?;
    let layout = ParamLayout::new(config);
    let mut data = vec![T::zero(); layout.total];
    let mut rng = rng_for(config.seed, &[TAG_INIT]);
    let depth_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    for t in &layout.tensors {
        let out = &mut data[t.range()];
        if !t.is_matrix() {
            out.iter_mut().for_each(|x| *x = T::one());
            continue;
        }
        let residual_out = t.name.ends_with(".wo") || t.name.ends_with(".w_down");
        let std = config.init_std * if residual_out { depth_scale } else { 1.0 };
        let normal = Normal::new(0.0, std).expect("positive std");
        for x in out.iter_mut() {
            *x = T::from_f64c(normal.sample(&mut rng));
        }
    }
    Ok(LmParams {
        config: config.clone(),
        layout,
        data,
    })
}

/// Grows a text-only model to the unified vocabulary. Text rows of the input
/// and output embeddings are copied; every new row is the mean text row plus
/// normal noise of scale `init_std`.
pub fn extend_vocab<T: Float>(text: &LmParams<T>, vocab: &UnifiedVocab) -> Result<LmParams<T>> {
    if let Some(from) = text.config.extended_from {
        return Err(Error::Model(format!(
            "vocabulary already extended (from {from} to {} ids)",
            text.config.vocab_size
        )));
    }
    if text.config.vocab_size != vocab.text_size as usize {
        return Err(Error::Model(format!(
            "layout mismatch: model has {} text ids, vocabulary expects {}",
            text.config.vocab_size, vocab.text_size
        )));
    }
    let old_v = text.config.vocab_size;
    let new_v = vocab.total_size() as usize;
    let d = text.config.d_model;
    let config = LmConfig {
        vocab_size: new_v,
        extended_from: Some(old_v),
        ..text.config.clone()
    };
    let layout = ParamLayout::new(&config);
    let mut data = vec![T::zero(); layout.total];
    let mut rng = rng_for(text.config.seed, &[TAG_EXTEND]);
    let normal = Normal::new(0.0, text.config.init_std).expect("positive std");
    for t in &layout.tensors {
        let src = text.layout.get(&t.name).expect("same tensor names");
        let old = &text.data[src.range()];
        let dst = &mut data[t.range()];
        if t.name != "tok_emb" && t.name != "head" {
            dst.copy_from_slice(old);
            continue;
        }
        dst[..old.len()].copy_from_slice(old);
        let mut mean = vec![0.0f64; d];
        for row in old.chunks_exact(d) {
            mean.iter_mut().zip(row).for_each(|(m, &x)| *m += x.to_f64c());
        }
        mean.iter_mut().for_each(|m| *m /= old_v as f64);
        for row in dst[old_v * d..new_v * d].chunks_exact_mut(d) {
            for (x, m) in row.iter_mut().zip(&mean) {
                *x = T::from_f64c(m + normal.sample(&mut rng));
            }
        }
    }
    Ok(LmParams { config, layout, data })
}
