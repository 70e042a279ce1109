use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ndcore::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }
}

/// First and second moment buffers, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update from the gradients held in `params`.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        if self.m.len() != params.len() {
            return Err(invalid("optimizer state does not match the parameter store"));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != t.len() {
                return Err(invalid(format!("moment buffer {i} has {} entries for {} values", m.len(), t.len())));
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                for j in 0..m.len() {
                    m[j] *= beta1;
                    v[j] *= beta2;
                }
                let data = t.data_mut();
                for j in 0..data.len() {
                    let upd = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                    data[j] -= lr * upd;
                }
                continue;
            };
            let data = t.data_mut();
            for j in 0..data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                data[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then inverse square-root decay.
pub fn lr_schedule(step: i64, warmup_updates: u64, peak_lr: f64) -> Result<f64> {
    if step < 0 {
        return Err(invalid(format!("step must be non-negative, got {step}")));
    }
    if warmup_updates == 0 {
        return Err(invalid("warmup_updates must be at least 1"));
    }
    let (s, w) = (step as f64, warmup_updates as f64);
    Ok(if s <= w { peak_lr * s / w } else { peak_lr * (w / s).sqrt() })
}
