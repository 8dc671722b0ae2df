//! AdamW-style optimizer with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moment buffers keyed by parameter name.
/// Moment buffers exist only for parameters that have taken a step, which
/// in practice means the trainable set.
pub struct Optimizer {
    cfg: AdamConfig,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl Optimizer {
    pub fn new(cfg: AdamConfig) -> Self {
        Optimizer {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Begin a new optimizer step. Call once per batch, then `update` each
    /// trainable parameter with its gradient.
    pub fn begin_step(&mut self, lr: f64) -> Result<f64> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.step += 1;
        Ok(lr)
    }

    /// Apply one AdamW update to a trainable parameter. Frozen parameters
    /// are skipped untouched.
    pub fn update(&mut self, name: &str, param: &mut Tensor, lr: f64) {
        if !param.requires_grad() {
            return;
        }
        let Some(grad) = param.grad().map(<[f64]>::to_vec) else {
            return;
        };
        let n = param.numel();
        let entry = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let (b1, b2, eps, wd) = (
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.eps,
            self.cfg.weight_decay,
        );
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i];
            entry.m[i] = b1 * entry.m[i] + (1.0 - b1) * g;
            entry.v[i] = b2 * entry.v[i] + (1.0 - b2) * g * g;
            let m_hat = entry.m[i] / bias1;
            let v_hat = entry.v[i] / bias2;
            data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
        }
    }

    /// Moment buffers for checkpointing, sorted by parameter name.
    pub fn export_moments(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        let mut names: Vec<&String> = self.moments.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| {
                let mom = &self.moments[n];
                (n.clone(), mom.m.clone(), mom.v.clone())
            })
            .collect()
    }

    pub fn import_moments(&mut self, step: u64, moments: Vec<(String, Vec<f64>, Vec<f64>)>) {
        self.step = step;
        self.moments = moments
            .into_iter()
            .map(|(n, m, v)| (n, Moments { m, v }))
            .collect();
    }
}
