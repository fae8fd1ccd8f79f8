use serde::{Deserialize, Serialize};

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps.
    pub warmup: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 100,
            clip: 1.0,
        }
    }
}

impl AdamConfig {
    /// Learning rate for the (0-based) update `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            return self.lr;
        }
        self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Clips `grad` in place, then applies one Adam update to `params`.
    /// Returns the gradient norm before clipping.
    pub fn update<T: Scalar>(&mut self, cfg: &AdamConfig, params: &mut [T], grad: &mut [T]) -> f64 {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        let norm = grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
        let clip_scale = if cfg.clip > 0.0 && norm > cfg.clip { cfg.clip / norm } else { 1.0 };
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i].as_f64() * clip_scale;
            grad[i] = T::of(g);
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            if lr == 0.0 {
                continue;
            }
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let delta = lr * mhat / (vhat.sqrt() + cfg.eps);
            params[i] = T::of(params[i].as_f64() - delta);
        }
        norm
    }
}
