//! Adam with a linear-warmup-then-constant learning rate.

use serde::{Deserialize, Serialize};

use super::mat::round_f32;
use super::params::Weights;
use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// When set, the rate decays linearly after warmup and reaches 0 at this step.
    pub decay_to_zero_at: Option<usize>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 0, max_grad_norm: Some(1.0), decay_to_zero_at: None }
    }
}

impl AdamConfig {
    /// Learning rate applied at zero-based update `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.decay_to_zero_at {
            Some(end) if end > self.warmup_steps => {
                let left = end.saturating_sub(step) as f64;
                self.lr * left / (end - self.warmup_steps) as f64
            }
            Some(_) => 0.0,
            None => self.lr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Weights,
    v: Weights,
    step: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, model: &ModelConfig) -> Self {
        Self { config, m: Weights::zeros(model), v: Weights::zeros(model), step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update in place and returns the pre-clip gradient norm.
    pub fn update(&mut self, weights: &mut Weights, grads: &Weights) -> f64 {
        let c = self.config;
        let norm = grads.sq_norm().sqrt();
        let clip = match c.max_grad_norm {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        let lr = c.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let params = weights.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads.params()).zip(ms).zip(vs) {
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] = round_f32(p.data[i] - lr * mhat / (vhat.sqrt() + c.eps));
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule() {
        let c = AdamConfig { lr: 1e-3, warmup_steps: 4, ..AdamConfig::default() };
        let lrs: Vec<f64> = (0..6).map(|s| c.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.0, 2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3]);
        let flat = AdamConfig { lr: 1e-3, warmup_steps: 0, ..AdamConfig::default() };
        assert_eq!(flat.lr_at(0), 1e-3);
        let decay = AdamConfig { lr: 1e-3, warmup_steps: 2, decay_to_zero_at: Some(6), ..AdamConfig::default() };
        let lrs: Vec<f64> = (0..8).map(|s| decay.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.0, 5e-4, 1e-3, 7.5e-4, 5e-4, 2.5e-4, 0.0, 0.0]);
    }
}
