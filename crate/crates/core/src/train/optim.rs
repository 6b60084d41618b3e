use serde::{Deserialize, Serialize};

use crate::model::{LmParams, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap (0 disables clipping).
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

pub fn new_state(n: usize) -> OptimizerState {
    OptimizerState {
        step: 0,
        m: vec![0.0; n],
        v: vec![0.0; n],
    }
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// One decoupled-weight-decay Adam update. Decay applies to rank-2 tensors.
pub fn adamw_step(p: &mut LmParams<f32>, grads: &[f32], state: &mut OptimizerState, cfg: &AdamWConfig, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let step_size = (lr / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let eps = cfg.eps as f32;
    let decay = (lr * cfg.weight_decay) as f32;
    for tensor in &p.layout.tensors {
        let decays = tensor.is_matrix() && cfg.weight_decay > 0.0;
        for i in tensor.range() {
            let g = grads[i];
            let m = b1 * state.m[i] + (1.0 - b1) * g;
            let v = b2 * state.v[i] + (1.0 - b2) * g * g;
            state.m[i] = m;
            state.v[i] = v;
            let mut w = p.data[i];
            if decays {
                w -= decay * w;
            }
            w -= step_size * m / (v.sqrt() / bc2_sqrt + eps);
            p.data[i] = w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, LmConfig};

    fn params() -> LmParams<f32> {
        init_model(&LmConfig {
            vocab_size: 7,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_only_decays_matrices() {
        let mut p = params();
        let before = p.clone();
        let mut st = new_state(p.data.len());
        let cfg = AdamWConfig::default();
        let zeros = vec![0.0; p.data.len()];
        adamw_step(&mut p, &zeros, &mut st, &cfg, 0.01);
        for t in &p.layout.tensors {
            for i in t.range() {
                let want = if t.is_matrix() {
                    before.data[i] - (0.01f64 * 0.1) as f32 * before.data[i]
                } else {
                    before.data[i]
                };
                assert_eq!(p.data[i], want, "{}", t.name);
            }
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = params();
        let before = p.clone();
        let mut st = new_state(p.data.len());
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g: Vec<f32> = (0..p.data.len()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect();
        adamw_step(&mut p, &g, &mut st, &cfg, 1e-3);
        for i in 0..g.len() {
            let delta = (p.data[i] - before.data[i]) as f64;
            assert!((delta + 1e-3 * g[i].signum() as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![3.0f32, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-7 && (g[1] - 0.8).abs() < 1e-7);
        let mut small = vec![0.1f32, 0.1];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }
}
