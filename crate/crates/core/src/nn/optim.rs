//! AdamW with decoupled weight decay, global-norm clipping and a step schedule.

use serde::{Deserialize, Serialize};

use super::params::{ModelParams, ParamGrads};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only; biases, norm parameters and position tables are exempt.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ModelParams) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamW {
            cfg,
            m: zeros(),
            v: zeros(),
            decay: params
                .tensors
                .iter()
                .map(|t| t.shape.len() == 2 && t.name.ends_with(".weight"))
                .collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.tensors[i]);
            let wd = if self.decay[i] { c.weight_decay } else { 0.0 };
            for j in 0..t.data.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                t.data[j] -= lr * (update + wd * t.data[j]);
            }
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// `lr0 · factor^floor(epoch / period)`.
pub fn step_lr(lr0: f64, factor: f64, period: usize, epoch: usize) -> f64 {
    lr0 * factor.powi((epoch / period) as i32)
}
