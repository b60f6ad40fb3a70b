use serde::{Deserialize, Serialize};

use super::{GradBuffer, ParamStore};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// Bias-corrected Adam moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update `θ ← θ − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &GradBuffer<f32>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(shape_err!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            ));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            if p.len() != g.len() || m.len() != g.len() {
                return Err(shape_err!("parameter {} gradient length", id.index()));
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                p[i] -= (c.lr * mhat / (vhat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradBuffer<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}
