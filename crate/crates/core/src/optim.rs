//! SGD with momentum, coupled weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SelcError};
use crate::mlp::{Gradients, MlpModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is divided by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-3,
            milestones: vec![40, 80],
            decay_factor: 10.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SelcError::param(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SelcError::param(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(SelcError::param(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(SelcError::param(format!(
                "decay_factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if self.decay_factor < 1.0 {
            // lr would grow at each milestone
            return Err(SelcError::param("decay_factor below 1 makes lr increase"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr / self.decay_factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: SgdConfig,
    buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, model: &MlpModel) -> Result<Self> {
        config.validate()?;
        let buffers = model
            .param_slices()
            .iter()
            .map(|s| vec![0.0; s.len()])
            .collect();
        Ok(Self { config, buffers })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.config.lr_at(epoch)
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    /// `buf ← μ·buf + (g + λ·θ)`, then `θ ← θ − lr(epoch)·buf`.
    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients, epoch: usize) -> Result<()> {
        if !grads.is_finite() {
            return Err(SelcError::Divergence {
                epoch,
                detail: "nonfinite gradient".into(),
            });
        }
        let lr = self.lr_at(epoch);
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        let grad_slices = grads.slices();
        let mut params = model.param_slices_mut();
        if grad_slices.len() != params.len()
            || self.buffers.len() != params.len()
            || grad_slices
                .iter()
                .zip(params.iter())
                .any(|(g, p)| g.len() != p.len())
        {
            return Err(SelcError::dim("gradient layout does not match the model"));
        }
        for ((param, grad), buf) in params
            .iter_mut()
            .zip(grad_slices)
            .zip(self.buffers.iter_mut())
        {
            for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
                *b = momentum * *b + (g + weight_decay * *p);
                *p -= lr * *b;
            }
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::step`].
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &Gradients,
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<()> {
    state.step(model, grads, epoch)
}
