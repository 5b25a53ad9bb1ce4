//! Adam with L2 weight decay and a cosine learning-rate schedule with
//! linear warmup.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
}

impl Default for OptimizerConfig {
    /// The reference pretraining settings, with the learning rate raised
    /// from 2e-4 to 1e-3 for desk-scale batches.
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            weight_decay: 5e-7,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac must lie in [0, 1], got {}", self.warmup_frac)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Linear warmup to the base rate, then cosine decay to zero.
pub fn schedule_lr(cfg: &OptimizerConfig, step: usize, total_steps: usize) -> f64 {
    let total = total_steps.max(1);
    let warmup = (cfg.warmup_frac * total as f64).floor() as usize;
    if step < warmup {
        return cfg.learning_rate * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with per-parameter first/second moment buffers keyed by name.
pub struct Adam {
    cfg: OptimizerConfig,
    slots: BTreeMap<String, Slot>,
    step_count: usize,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Adam {
        Adam { cfg, slots: BTreeMap::new(), step_count: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Apply one update to a parameter from the gradient stored on it.
    /// Weight decay is added to the gradient before the moment updates.
    pub fn update(&mut self, name: &str, param: &mut Tensor, lr: f64) -> Result<()> {
        let grad = param
            .grad()
            .ok_or_else(|| Error::Input(format!("parameter {name} has no gradient")))?
            .to_vec();
        let n = param.numel();
        let slot = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| Slot { m: vec![0.0; n], v: vec![0.0; n] });
        if slot.m.len() != n {
            return Err(Error::Shape {
                op: "adam_update",
                detail: format!("moment buffers for {name} hold {} values, parameter has {n}", slot.m.len()),
            });
        }
        let t = (self.step_count + 1) as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i] + self.cfg.weight_decay * data[i];
            slot.m[i] = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g;
            slot.v[i] = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
        Ok(())
    }

    /// Mark one optimization step done (after all parameters updated).
    pub fn advance(&mut self) {
        self.step_count += 1;
    }
}
