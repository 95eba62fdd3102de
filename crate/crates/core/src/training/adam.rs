use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { t: 0, m, v }
    }
}

/// One bias-corrected Adam update in place; advances `state.t`.
pub fn adam_step(params: &mut [Vec<f32>], grads: &[Vec<f32>], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::invalid(format!("adam: tensor {i} length mismatch")));
        }
        for k in 0..p.len() {
            let gk = g[k] as f64;
            let mk = cfg.beta1 * m[k] as f64 + (1.0 - cfg.beta1) * gk;
            let vk = cfg.beta2 * v[k] as f64 + (1.0 - cfg.beta2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
            p[k] = (p[k] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Step schedule `base · factor^(−⌊t / interval⌋)`.
pub fn learning_rate(base: f64, factor: f64, interval: u64, t: u64) -> f64 {
    base * factor.powi(-((t / interval.max(1)) as i32))
}
