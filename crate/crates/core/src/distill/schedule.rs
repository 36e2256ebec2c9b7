//! Warmup plus cosine learning-rate schedule and momentum SGD.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSchedule {
    pub peak_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default)]
    pub clip_norm: f64,
}

impl Default for OptimizerSchedule {
    fn default() -> Self {
        Self {
            peak_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 4,
            epochs: 20,
            steps_per_epoch: 1,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerSchedule {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "schedule needs 0 <= warmup ({}) < epochs ({}) and at least one step per epoch",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.peak_lr >= 0.0)
            || !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0)
            || !(self.clip_norm >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid optimizer settings: lr {}, momentum {}, weight decay {}, clip {}",
                self.peak_lr, self.momentum, self.weight_decay, self.clip_norm
            )));
        }
        Ok(())
    }

    /// Linear ramp from 0 to the peak over the warmup, then
    /// `peak · ½(1 + cos(π · progress))` over the remaining steps.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let total = self.total_steps();
        if step >= total {
            return Err(Error::Contract(format!(
                "step {step} outside schedule of {total} steps"
            )));
        }
        let warm = self.warmup_steps();
        if step < warm {
            return Ok(self.peak_lr * step as f64 / warm as f64);
        }
        let progress = (step - warm) as f64 / (total - warm) as f64;
        Ok(self.peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// SGD with momentum and coupled weight decay:
/// `g ← g + λw; v ← μv + g; w ← w − lr·v`.
///
/// With a positive `clip_norm`, raw gradients are first rescaled so their
/// global norm over the trainable set does not exceed it.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            clip_norm: 0.0,
            velocity: HashMap::new(),
        }
    }

    pub fn with_clip(mut self, clip_norm: f64) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    fn clip_factor(&self, registry: &ParamRegistry) -> f64 {
        if self.clip_norm <= 0.0 {
            return 1.0;
        }
        let norm = registry
            .trainable()
            .map(|(_, t)| t.grad_or_zeros().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    /// Frozen parameters are never read or written.
    pub fn step(&mut self, registry: &ParamRegistry, lr: f64) -> Result<()> {
        let c = self.clip_factor(registry);
        for (name, tensor) in registry.trainable() {
            let grad = tensor.grad_or_zeros();
            let mut w = tensor.to_vec();
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(&grad) {
                let g = c * gi + self.weight_decay * *wi;
                *vi = self.momentum * *vi + g;
                *wi -= lr * *vi;
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter `{name}` became non-finite"
                )));
            }
            tensor.set_data(&w)?;
        }
        Ok(())
    }
}
