//! AdamW, learning-rate schedules and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update of every parameter with its gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<(), TrainError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TrainError::Config(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(TrainError::Config(format!(
                    "tensor {i}: parameter has {} values, gradient {}",
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFinite {
                    step: self.t,
                    what: format!("gradient of tensor {i}"),
                    last_good: None,
                });
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let decay = 1.0 - lr * weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x = *x * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then cosine decay to zero.
    CosineWithWarmup,
}

/// Learning rate for the update at 0-based `step` of `total`.
pub fn learning_rate(schedule: LrSchedule, base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::CosineWithWarmup => {
            if step < warmup {
                return base * (step + 1) as f64 / warmup as f64;
            }
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`
/// (0 disables clipping). Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
    norm
}
