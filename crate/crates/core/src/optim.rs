//! Mini-batch SGD with momentum, L2 weight decay, and an
//! endpoint-interpolating learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::scalar::Scalar;

/// Shape of the decay curve between `lr_start` and `lr_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Geometric interpolation; the conventional choice for a multi-decade
    /// drop between stated endpoints.
    #[default]
    Exponential,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub schedule: LrSchedule,
}

impl SgdConfig {
    pub fn new(total_steps: usize) -> Self {
        Self {
            lr_start: 1e-1,
            lr_end: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-5,
            total_steps,
            schedule: LrSchedule::Exponential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Domain(format!(
                "require lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Domain("total_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based). Interpolates from `lr_start` at step 0
/// to `lr_end` at the final step.
pub fn lr_at(config: &SgdConfig, step: usize) -> Result<f64> {
    if step >= config.total_steps {
        return Err(Error::Domain(format!(
            "step {} out of range for {} total steps",
            step, config.total_steps
        )));
    }
    if config.total_steps == 1 {
        return Ok(config.lr_start);
    }
    let t = step as f64 / (config.total_steps - 1) as f64;
    Ok(match config.schedule {
        LrSchedule::Exponential => config.lr_start * (config.lr_end / config.lr_start).powf(t),
        LrSchedule::Linear => config.lr_start + (config.lr_end - config.lr_start) * t,
    })
}

/// One optimizer step over a set of parameters:
/// g <- grad + weight_decay * theta; v <- momentum * v + g;
/// theta <- theta - lr(step) * v. Gradient buffers are zeroed afterwards.
/// A non-finite gradient aborts before any parameter is touched.
pub fn sgd_step<F: Scalar>(
    params: &mut [&mut Param<F>],
    config: &SgdConfig,
    step: usize,
) -> Result<()> {
    let lr = F::c(lr_at(config, step)?);
    let momentum = F::c(config.momentum);
    let wd = F::c(config.weight_decay);

    for param in params.iter() {
        if let Some(idx) = param.grad.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::PoisonedGradients {
                param: param.name.to_string(),
                index: idx,
            });
        }
    }

    for param in params.iter_mut() {
        let theta = param.value.data_mut();
        let grad = param.grad.data_mut();
        let vel = param.velocity.data_mut();
        for i in 0..theta.len() {
            let g = grad[i] + wd * theta[i];
            vel[i] = momentum * vel[i] + g;
            theta[i] -= lr * vel[i];
            grad[i] = F::zero();
        }
    }
    Ok(())
}
