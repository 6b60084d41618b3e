//! Batched forward and backward passes of the decoder.
//!
//! Position-wise layers run on all sequences of a batch packed into one
//! `N × d` matrix; attention runs per sequence and head.

use crate::error::{Error, Result};
use crate::linalg::{gemm, matmul, matmul_nt, matmul_tn, Float, Layout};

use super::params::{LayerOffsets, LmParams};

/// Rotary angles for positions `0..len`, pairs `(2i, 2i+1)` of each head.
pub(crate) struct Rope<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Float> Rope<T> {
    pub(crate) fn new(len: usize, head_dim: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for p in 0..len {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let a = p as f64 * freq;
                cos.push(T::from_f64c(a.cos()));
                sin.push(T::from_f64c(a.sin()));
            }
        }
        Rope { half, cos, sin }
    }

    /// Rotates one head slice at position `pos`; `inverse` rotates backwards.
    #[inline]
    pub(crate) fn apply(&self, x: &mut [T], pos: usize, inverse: bool) {
        let c = &self.cos[pos * self.half..(pos + 1) * self.half];
        let s = &self.sin[pos * self.half..(pos + 1) * self.half];
        for i in 0..self.half {
            let (x0, x1) = (x[2 * i], x[2 * i + 1]);
            let sn = if inverse { -s[i] } else { s[i] };
            x[2 * i] = x0 * c[i] - x1 * sn;
            x[2 * i + 1] = x0 * sn + x1 * c[i];
        }
    }
}

pub(crate) fn rmsnorm<T: Float>(x: &[T], g: &[T], eps: T, y: &mut [T], inv: &mut [T]) {
    let d = g.len();
    let dt = T::from_usize(d).unwrap();
    for ((xr, yr), iv) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).zip(inv.iter_mut()) {
        let ms = xr.iter().fold(T::zero(), |a, &v| a + v * v) / dt;
        let r = T::one() / (ms + eps).sqrt();
        *iv = r;
        for ((o, &v), &gj) in yr.iter_mut().zip(xr).zip(g) {
            *o = v * r * gj;
        }
    }
}

/// Accumulates `dx` and `dg` for `y = x · inv · g`.
fn rmsnorm_back<T: Float>(x: &[T], g: &[T], inv: &[T], dy: &[T], dx: &mut [T], dg: &mut [T]) {
    let d = g.len();
    let dt = T::from_usize(d).unwrap();
    for (((xr, dyr), dxr), &r) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(inv)
    {
        let mut s = T::zero();
        for j in 0..d {
            s += dyr[j] * g[j] * xr[j];
            dg[j] += dyr[j] * xr[j] * r;
        }
        let k = r * r * r * s / dt;
        for j in 0..d {
            dxr[j] += r * g[j] * dyr[j] - xr[j] * k;
        }
    }
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

struct LayerCache<T> {
    x: Vec<T>,
    inv1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    x2: Vec<T>,
    inv2: Vec<T>,
    b: Vec<T>,
    g: Vec<T>,
    u: Vec<T>,
    h: Vec<T>,
}

/// Activations of one batched forward pass.
pub struct ForwardPass<T> {
    /// `(offset, len)` of each packed sequence.
    spans: Vec<(usize, usize)>,
    prob_offsets: Vec<usize>,
    ids: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    final_in: Vec<T>,
    final_inv: Vec<T>,
    final_out: Vec<T>,
    /// `N × vocab` logits, row per packed position.
    pub logits: Vec<T>,
}

impl<T> ForwardPass<T> {
    pub fn n_positions(&self) -> usize {
        self.ids.len()
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }
}

pub(crate) fn check_ids<T: Float>(p: &LmParams<T>, ids: &[u32]) -> Result<()> {
    let c = &p.config;
    if ids.len() > c.max_seq_len {
        return Err(Error::Model(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            ids.len(),
            c.max_seq_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= c.vocab_size) {
        return Err(Error::Model(format!("token id {bad} >= vocab_size {}", c.vocab_size)));
    }
    Ok(())
}

fn head_view(offset_row: usize, d: usize, h: usize, dh: usize) -> Layout {
    Layout {
        offset: offset_row * d + h * dh,
        rs: d,
        cs: 1,
    }
}

fn head_view_t(offset_row: usize, d: usize, h: usize, dh: usize) -> Layout {
    Layout {
        offset: offset_row * d + h * dh,
        rs: 1,
        cs: d,
    }
}

/// Runs the decoder over each input sequence and keeps every activation
/// needed by [`backward`].
pub fn forward<T: Float>(p: &LmParams<T>, inputs: &[&[u32]]) -> Result<ForwardPass<T>> {
    let c = &p.config;
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    let (nh, dh) = (c.n_heads, c.head_dim());
    let eps = T::from_f64c(c.norm_eps);
    let scale = T::from_f64c(1.0 / (dh as f64).sqrt());
    let mut spans = Vec::with_capacity(inputs.len());
    let mut prob_offsets = Vec::with_capacity(inputs.len());
    let mut ids = Vec::new();
    let mut max_len = 0;
    let mut prob_total = 0;
    for s in inputs {
        check_ids(p, s)?;
        spans.push((ids.len(), s.len()));
        prob_offsets.push(prob_total);
        prob_total += nh * s.len() * s.len();
        ids.extend_from_slice(s);
        max_len = max_len.max(s.len());
    }
    let n = ids.len();
    let rope = Rope::<T>::new(max_len, dh, c.rope_theta);
    let w = &p.data;
    let emb = &w[p.layout.tok_emb..p.layout.tok_emb + v * d];
    let mut x = Vec::with_capacity(n * d);
    for &id in &ids {
        x.extend_from_slice(&emb[id as usize * d..(id as usize + 1) * d]);
    }

    let mut layers = Vec::with_capacity(c.n_layers);
    for lo in &p.layout.layers {
        let mat = |off: usize, r: usize, cols: usize| &w[off..off + r * cols];
        let mut inv1 = vec![T::zero(); n];
        let mut a = vec![T::zero(); n * d];
        rmsnorm(&x, &w[lo.attn_norm..lo.attn_norm + d], eps, &mut a, &mut inv1);
        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * d];
        let mut vv = vec![T::zero(); n * d];
        matmul(&a, mat(lo.wq, d, d), &mut q, n, d, d, false);
        matmul(&a, mat(lo.wk, d, d), &mut k, n, d, d, false);
        matmul(&a, mat(lo.wv, d, d), &mut vv, n, d, d, false);
        for &(off, len) in &spans {
            for t in 0..len {
                for h in 0..nh {
                    let r = (off + t) * d + h * dh;
                    rope.apply(&mut q[r..r + dh], t, false);
                    rope.apply(&mut k[r..r + dh], t, false);
                }
            }
        }
        let mut probs = vec![T::zero(); prob_total];
        let mut o = vec![T::zero(); n * d];
        for (si, &(off, len)) in spans.iter().enumerate() {
            for h in 0..nh {
                let po = prob_offsets[si] + h * len * len;
                let pm = &mut probs[po..po + len * len];
                gemm(
                    len,
                    dh,
                    len,
                    scale,
                    &q,
                    head_view(off, d, h, dh),
                    &k,
                    head_view_t(off, d, h, dh),
                    T::zero(),
                    pm,
                    Layout::row_major(len),
                );
                for i in 0..len {
                    let row = &mut pm[i * len..(i + 1) * len];
                    let m = row[..=i].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut z = T::zero();
                    for e in row[..=i].iter_mut() {
                        *e = (*e - m).exp();
                        z += *e;
                    }
                    for e in row[..=i].iter_mut() {
                        *e /= z;
                    }
                    row[i + 1..].iter_mut().for_each(|e| *e = T::zero());
                }
                gemm(
                    len,
                    len,
                    dh,
                    T::one(),
                    pm,
                    Layout::row_major(len),
                    &vv,
                    head_view(off, d, h, dh),
                    T::zero(),
                    &mut o,
                    head_view(off, d, h, dh),
                );
            }
        }
        let mut x2 = x.clone();
        matmul(&o, mat(lo.wo, d, d), &mut x2, n, d, d, true);
        let mut inv2 = vec![T::zero(); n];
        let mut b = vec![T::zero(); n * d];
        rmsnorm(&x2, &w[lo.mlp_norm..lo.mlp_norm + d], eps, &mut b, &mut inv2);
        let mut g = vec![T::zero(); n * f];
        let mut u = vec![T::zero(); n * f];
        matmul(&b, mat(lo.w_gate, d, f), &mut g, n, d, f, false);
        matmul(&b, mat(lo.w_up, d, f), &mut u, n, d, f, false);
        let h: Vec<T> = g.iter().zip(&u).map(|(&gi, &ui)| gi * sigmoid(gi) * ui).collect();
        let mut x3 = x2.clone();
        matmul(&h, mat(lo.w_down, f, d), &mut x3, n, f, d, true);
        layers.push(LayerCache {
            x: std::mem::replace(&mut x, x3),
            inv1,
            a,
            q,
            k,
            v: vv,
            probs,
            o,
            x2,
            inv2,
            b,
            g,
            u,
            h,
        });
    }
    let mut final_inv = vec![T::zero(); n];
    let mut final_out = vec![T::zero(); n * d];
    rmsnorm(&x, &w[p.layout.final_norm..p.layout.final_norm + d], eps, &mut final_out, &mut final_inv);
    let mut logits = vec![T::zero(); n * v];
    matmul_nt(&final_out, &w[p.layout.head..p.layout.head + v * d], &mut logits, n, d, v, false);
    Ok(ForwardPass {
        spans,
        prob_offsets,
        ids,
        layers,
        final_in: x,
        final_inv,
        final_out,
        logits,
    })
}

/// Log-softmax of one logit row evaluated at `target`, in f64.
pub fn log_prob_at<T: Float>(row: &[T], target: usize) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.to_f64c()));
    let z: f64 = row.iter().map(|&x| (x.to_f64c() - m).exp()).sum();
    row[target].to_f64c() - m - z.ln()
}

/// Backpropagates `dlogits` (`N × vocab`) and accumulates into `grads`.
pub fn backward<T: Float>(p: &LmParams<T>, fp: &ForwardPass<T>, dlogits: &[T], grads: &mut [T]) {
    let c = &p.config;
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    let (nh, dh) = (c.n_heads, c.head_dim());
    let scale = T::from_f64c(1.0 / (dh as f64).sqrt());
    let n = fp.ids.len();
    let w = &p.data;
    let lay = &p.layout;
    let max_len = fp.spans.iter().map(|s| s.1).max().unwrap_or(0);
    let rope = Rope::<T>::new(max_len, dh, c.rope_theta);

    // output head and final norm
    matmul_tn(dlogits, &fp.final_out, &mut grads[lay.head..lay.head + v * d], n, v, d, true);
    let mut dfo = vec![T::zero(); n * d];
    matmul(dlogits, &w[lay.head..lay.head + v * d], &mut dfo, n, v, d, false);
    let mut dx = vec![T::zero(); n * d];
    {
        let (gw, dg) = (&w[lay.final_norm..lay.final_norm + d], &mut grads[lay.final_norm..lay.final_norm + d]);
        rmsnorm_back(&fp.final_in, gw, &fp.final_inv, &dfo, &mut dx, dg);
    }

    for (lo, lc) in lay.layers.iter().zip(&fp.layers).rev() {
        let LayerOffsets {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            mlp_norm,
            w_gate,
            w_up,
            w_down,
        } = *lo;
        // MLP
        matmul_tn(&lc.h, &dx, &mut grads[w_down..w_down + f * d], n, f, d, true);
        let mut dh_ = vec![T::zero(); n * f];
        matmul_nt(&dx, &w[w_down..w_down + f * d], &mut dh_, n, d, f, false);
        let mut dg = vec![T::zero(); n * f];
        let mut du = vec![T::zero(); n * f];
        for i in 0..n * f {
            let gi = lc.g[i];
            let s = sigmoid(gi);
            let silu = gi * s;
            du[i] = dh_[i] * silu;
            dg[i] = dh_[i] * lc.u[i] * s * (T::one() + gi * (T::one() - s));
        }
        matmul_tn(&lc.b, &dg, &mut grads[w_gate..w_gate + d * f], n, d, f, true);
        matmul_tn(&lc.b, &du, &mut grads[w_up..w_up + d * f], n, d, f, true);
        let mut db = vec![T::zero(); n * d];
        matmul_nt(&dg, &w[w_gate..w_gate + d * f], &mut db, n, f, d, false);
        matmul_nt(&du, &w[w_up..w_up + d * f], &mut db, n, f, d, true);
        // dx now holds d(x2) after adding the norm branch
        rmsnorm_back(&lc.x2, &w[mlp_norm..mlp_norm + d], &lc.inv2, &db, &mut dx, &mut grads[mlp_norm..mlp_norm + d]);

        // attention output projection
        matmul_tn(&lc.o, &dx, &mut grads[wo..wo + d * d], n, d, d, true);
        let mut do_ = vec![T::zero(); n * d];
        matmul_nt(&dx, &w[wo..wo + d * d], &mut do_, n, d, d, false);

        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        for (si, &(off, len)) in fp.spans.iter().enumerate() {
            let mut dp = vec![T::zero(); len * len];
            for h in 0..nh {
                let po = fp.prob_offsets[si] + h * len * len;
                let pm = &lc.probs[po..po + len * len];
                gemm(
                    len,
                    dh,
                    len,
                    T::one(),
                    &do_,
                    head_view(off, d, h, dh),
                    &lc.v,
                    head_view_t(off, d, h, dh),
                    T::zero(),
                    &mut dp,
                    Layout::row_major(len),
                );
                gemm(
                    len,
                    len,
                    dh,
                    T::one(),
                    pm,
                    Layout::transposed(len),
                    &do_,
                    head_view(off, d, h, dh),
                    T::zero(),
                    &mut dv,
                    head_view(off, d, h, dh),
                );
                for i in 0..len {
                    let pr = &pm[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let dot = (0..=i).fold(T::zero(), |a, j| a + pr[j] * dr[j]);
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                    dr[i + 1..].iter_mut().for_each(|e| *e = T::zero());
                }
                gemm(
                    len,
                    len,
                    dh,
                    T::one(),
                    &dp,
                    Layout::row_major(len),
                    &lc.k,
                    head_view(off, d, h, dh),
                    T::zero(),
                    &mut dq,
                    head_view(off, d, h, dh),
                );
                gemm(
                    len,
                    len,
                    dh,
                    T::one(),
                    &dp,
                    Layout::transposed(len),
                    &lc.q,
                    head_view(off, d, h, dh),
                    T::zero(),
                    &mut dk,
                    head_view(off, d, h, dh),
                );
            }
            for t in 0..len {
                for h in 0..nh {
                    let r = (off + t) * d + h * dh;
                    rope.apply(&mut dq[r..r + dh], t, true);
                    rope.apply(&mut dk[r..r + dh], t, true);
                }
            }
        }
        matmul_tn(&lc.a, &dq, &mut grads[wq..wq + d * d], n, d, d, true);
        matmul_tn(&lc.a, &dk, &mut grads[wk..wk + d * d], n, d, d, true);
        matmul_tn(&lc.a, &dv, &mut grads[wv..wv + d * d], n, d, d, true);
        let mut da = vec![T::zero(); n * d];
        matmul_nt(&dq, &w[wq..wq + d * d], &mut da, n, d, d, false);
        matmul_nt(&dk, &w[wk..wk + d * d], &mut da, n, d, d, true);
        matmul_nt(&dv, &w[wv..wv + d * d], &mut da, n, d, d, true);
        rmsnorm_back(&lc.x, &w[attn_norm..attn_norm + d], &lc.inv1, &da, &mut dx, &mut grads[attn_norm..attn_norm + d]);
    }
    let demb = &mut grads[lay.tok_emb..lay.tok_emb + v * d];
    for (i, &id) in fp.ids.iter().enumerate() {
        let row = &mut demb[id as usize * d..(id as usize + 1) * d];
        row.iter_mut().zip(&dx[i * d..(i + 1) * d]).for_each(|(g, &x)| *g += x);
    }
}

/// Mean next-token cross-entropy over included targets of every sequence in
/// the batch, with gradients. `include[s][i]` selects the target `seqs[s][i+1]`.
pub fn loss_and_grads<T: Float>(
    p: &LmParams<T>,
    seqs: &[&[u32]],
    include: &[Vec<bool>],
) -> Result<(f64, Vec<T>)> {
    if seqs.len() != include.len() {
        return Err(Error::Model("one include mask per sequence required".into()));
    }
    for (s, m) in seqs.iter().zip(include) {
        if s.len() < 2 {
            return Err(Error::Model("sequence needs at least 2 tokens".into()));
        }
        if m.len() != s.len() - 1 {
            return Err(Error::Model(format!(
                "include mask has {} entries for {} targets",
                m.len(),
                s.len() - 1
            )));
        }
    }
    let count: usize = include.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
    if count == 0 {
        return Err(Error::Model("mask excludes every position".into()));
    }
    let inputs: Vec<&[u32]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
    let fp = forward(p, &inputs)?;
    let v = p.config.vocab_size;
    let weight = 1.0 / count as f64;
    let mut dlogits = vec![T::zero(); fp.logits.len()];
    let mut loss = 0.0f64;
    for (si, &(off, len)) in fp.spans.iter().enumerate() {
        for t in 0..len {
            if !include[si][t] {
                continue;
            }
            let target = seqs[si][t + 1] as usize;
            let row = &fp.logits[(off + t) * v..(off + t + 1) * v];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.to_f64c()));
            let z: f64 = row.iter().map(|&x| (x.to_f64c() - m).exp()).sum();
            loss -= row[target].to_f64c() - m - z.ln();
            let dr = &mut dlogits[(off + t) * v..(off + t + 1) * v];
            for (g, &x) in dr.iter_mut().zip(row) {
                *g = T::from_f64c((x.to_f64c() - m).exp() / z * weight);
            }
            dr[target] -= T::from_f64c(weight);
        }
    }
    let mut grads = vec![T::zero(); p.data.len()];
    backward(p, &fp, &dlogits, &mut grads);
    Ok((loss * weight, grads))
}
