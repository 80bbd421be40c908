use std::collections::BTreeMap;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::network::Param;

/// `scale · d^(−1/2) · min(step^(−1/2), step · warmup^(−3/2))`
pub fn noam_lr<S: Float>(step: u64, d_model: usize, warmup: u64, scale: S) -> S {
    let step = S::from(step.max(1)).expect("step fits the scalar type");
    let warmup = S::from(warmup.max(1)).expect("warmup fits the scalar type");
    let d = S::from(d_model).expect("d_model fits the scalar type");
    let half = S::from(0.5).expect("0.5");
    let rise = step * warmup.powf(-S::from(1.5).expect("1.5"));
    scale * d.powf(-half) * step.powf(-half).min(rise)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Global L2 norm over all gradients, accumulated in name order.
pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= c);
    }
    norm
}

/// Clips, then applies one bias-corrected Adam update to every parameter
/// that has a gradient. Returns the unclipped gradient norm.
pub fn adam_step(
    params: &mut BTreeMap<String, Param>,
    grads: &mut BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
    grad_clip: f64,
) -> f64 {
    let norm = clip_grad_norm(grads, grad_clip);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.iter() {
        let Some(p) = params.get_mut(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    norm
}
