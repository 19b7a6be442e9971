//! AdamW with decoupled weight decay, and a linear-warmup / step-decay
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config }
    }

    /// One AdamW update at learning rate `lr`. Increments the step counter
    /// and clears gradients.
    pub fn step(&self, store: &mut ParamStore, lr: f64) -> Result<(), TensorError> {
        if !store.has_grad {
            return Err(TensorError::EmptyGradients);
        }
        let c = &self.config;
        if let Some(max_norm) = c.grad_clip {
            let norm = store.grad_norm();
            if norm > max_norm {
                store.scale_grads(max_norm / norm);
            }
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in &mut store.params {
            let w = p.value.data_mut();
            let g = p.grad.data_mut();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * c.weight_decay * w[i];
                w[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
                g[i] = 0.0;
            }
        }
        store.has_grad = false;
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then multiply by `decay_factor` every
/// `decay_interval` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_interval: u64,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            warmup_steps: 1000,
            decay_interval: 5000,
            decay_factor: 0.5,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = self.base_lr > 0.0
            && self.base_lr.is_finite()
            && self.warmup_steps > 0
            && self.decay_interval > 0
            && self.decay_factor > 0.0
            && self.decay_factor <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::invalid("lr_schedule", format!("{self:?}")))
        }
    }

    /// Learning rate at optimizer step `step`. Step 0 is treated as step 1
    /// so the rate is strictly positive.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.base_lr * step.max(1) as f64 / self.warmup_steps as f64
        } else {
            let decays = (step - self.warmup_steps) / self.decay_interval;
            self.base_lr * self.decay_factor.powi(decays.min(i32::MAX as u64) as i32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w)).unwrap();
        s.accumulate_grad(id, &Tensor::scalar(g)).unwrap();
        s
    }

    fn no_decay() -> AdamW {
        AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        })
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut s = one_param(1.0, 0.0);
        no_decay().step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(s.id("w").unwrap()).item(), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δw = -lr / (1 + eps).
        let mut s = one_param(0.0, 1.0);
        no_decay().step(&mut s, 0.1).unwrap();
        let w = s.value(s.id("w").unwrap()).item();
        assert!((w + 0.1).abs() < 1e-8, "{w}");
        assert_eq!(s.step(), 1);
        assert_eq!(s.grad(s.id("w").unwrap()).item(), 0.0);
    }

    #[test]
    fn step_without_gradients_fails() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        assert_eq!(AdamW::default().step(&mut s, 0.1), Err(TensorError::EmptyGradients));
    }

    #[test]
    fn identical_stores_update_identically() {
        let mut a = one_param(0.3, -0.7);
        let mut b = a.clone();
        AdamW::default().step(&mut a, 1e-3).unwrap();
        AdamW::default().step(&mut b, 1e-3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_clip_bounds_update_direction() {
        let mut s = one_param(0.0, 100.0);
        let opt = AdamW::new(AdamWConfig {
            grad_clip: Some(1.0),
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, 0.1).unwrap();
        let (m, _) = s.moments(s.id("w").unwrap());
        assert!((m.item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::default();
        assert!((s.lr_at(500) - 5e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(1000), 1e-4);
        assert_eq!(s.lr_at(6000), 5e-5);
        assert!(s.lr_at(0) > 0.0);
    }
}
