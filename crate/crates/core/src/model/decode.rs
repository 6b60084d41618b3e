//! Incremental decoding with a key/value cache.

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, Float};

use super::params::LmParams;
use super::transformer::{check_ids, rmsnorm, Rope};

pub struct KvDecoder<'a, T: Float> {
    params: &'a LmParams<T>,
    rope: Rope<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    pos: usize,
}

impl<'a, T: Float> KvDecoder<'a, T> {
    pub fn new(params: &'a LmParams<T>) -> Self {
        let c = &params.config;
        KvDecoder {
            params,
            rope: Rope::new(c.max_seq_len, c.head_dim(), c.rope_theta),
            keys: vec![Vec::new(); c.n_layers],
            values: vec![Vec::new(); c.n_layers],
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, id: u32) -> Result<Vec<T>> {
        let p = self.params;
        let c = &p.config;
        if self.pos >= c.max_seq_len {
            return Err(Error::Model(format!("cache is full at max_seq_len {}", c.max_seq_len)));
        }
        check_ids(p, &[id])?;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let (nh, dh) = (c.n_heads, c.head_dim());
        let eps = T::from_f64c(c.norm_eps);
        let scale = T::from_f64c(1.0 / (dh as f64).sqrt());
        let w = &p.data;
        let lay = &p.layout;
        let e = lay.tok_emb + id as usize * d;
        let mut x = w[e..e + d].to_vec();
        let mut inv = [T::zero()];
        let mut a = vec![T::zero(); d];
        let mut q = vec![T::zero(); d];
        let mut k = vec![T::zero(); d];
        let mut vv = vec![T::zero(); d];
        let mut o = vec![T::zero(); d];
        let mut g = vec![T::zero(); f];
        let mut u = vec![T::zero(); f];
        let t = self.pos;
        for (l, lo) in lay.layers.iter().enumerate() {
            rmsnorm(&x, &w[lo.attn_norm..lo.attn_norm + d], eps, &mut a, &mut inv);
            matmul(&a, &w[lo.wq..lo.wq + d * d], &mut q, 1, d, d, false);
            matmul(&a, &w[lo.wk..lo.wk + d * d], &mut k, 1, d, d, false);
            matmul(&a, &w[lo.wv..lo.wv + d * d], &mut vv, 1, d, d, false);
            for h in 0..nh {
                self.rope.apply(&mut q[h * dh..(h + 1) * dh], t, false);
                self.rope.apply(&mut k[h * dh..(h + 1) * dh], t, false);
            }
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&vv);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut scores = vec![T::zero(); t + 1];
            for h in 0..nh {
                let qh = &q[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                    *s = qh.iter().zip(kh).fold(T::zero(), |acc, (&x, &y)| acc + x * y) * scale;
                }
                let m = scores.iter().fold(T::neg_infinity(), |acc, &s| acc.max(s));
                let mut z = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let oh = &mut o[h * dh..(h + 1) * dh];
                oh.iter_mut().for_each(|x| *x = T::zero());
                for (j, &s) in scores.iter().enumerate() {
                    let wgt = s / z;
                    let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
                    oh.iter_mut().zip(vh).for_each(|(x, &y)| *x += wgt * y);
                }
            }
            matmul(&o, &w[lo.wo..lo.wo + d * d], &mut x, 1, d, d, true);
            rmsnorm(&x, &w[lo.mlp_norm..lo.mlp_norm + d], eps, &mut a, &mut inv);
            matmul(&a, &w[lo.w_gate..lo.w_gate + d * f], &mut g, 1, d, f, false);
            matmul(&a, &w[lo.w_up..lo.w_up + d * f], &mut u, 1, d, f, false);
            for (gi, &ui) in g.iter_mut().zip(&u) {
                *gi = *gi / (T::one() + (-*gi).exp()) * ui;
            }
            matmul(&g, &w[lo.w_down..lo.w_down + f * d], &mut x, 1, f, d, true);
        }
        rmsnorm(&x, &w[lay.final_norm..lay.final_norm + d], eps, &mut a, &mut inv);
        let mut logits = vec![T::zero(); v];
        matmul_nt(&a, &w[lay.head..lay.head + v * d], &mut logits, 1, d, v, false);
        self.pos += 1;
        Ok(logits)
    }
}
