use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from zero to `lr`, then linear decay to `min_lr` at
/// `total_steps`, flat afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub lr: f64,
    pub weight_decay: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-6,
            min_lr: 1e-6,
            warmup_steps: 5000,
            total_steps: 100_000,
            batch_size: 64,
            grad_clip: Some(1.0),
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::config("need 0 <= min_lr <= lr and lr > 0"));
        }
        if self.total_steps < self.warmup_steps {
            return Err(Error::config("total_steps is shorter than the warmup"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return self.lr.max(self.min_lr);
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        (self.lr + (self.min_lr - self.lr) * t).max(self.min_lr)
    }
}
