//! Adam with warmup + cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameter;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} invalid", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based): linear warmup to the peak, then
    /// cosine decay to zero at the final step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_fraction * self.steps as f64).round() as usize;
        if self.steps == 0 {
            return 0.0;
        }
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        let span = (self.steps - warmup).max(1);
        let progress = (step - warmup) as f64 / span as f64;
        let Schedule::Cosine = self.schedule;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam optimizer state (decoupled weight decay is zero at desk scale).
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &[Parameter]) -> Adam {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. `grads[i]` must match `params[i]` in shape; non-finite
    /// gradients abort with a numeric error.
    pub fn step(&mut self, params: &mut [Parameter], grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape != p.tensor.shape {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} for parameter {} {:?}",
                    g.shape, p.name, p.tensor.shape
                )));
            }
            g.check_finite(&format!("gradient of {}", p.name))?;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..g.data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g.data[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g.data[k] * g.data[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p.tensor.data[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.tensor.check_finite(&format!("parameter {} after update", p.name))?;
        }
        Ok(())
    }
}
