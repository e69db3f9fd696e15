//! Dual-branch vision transformer: online encoder, pixel decoder, rep decoder,
//! projector and predictor, plus the EMA-updated target encoder, rep decoder
//! and projector.

mod config;
mod model;
pub mod nn;

use serde::{Deserialize, Serialize};

pub use config::{BackboneConfig, Precision, StackConfig};
pub use model::{
    copy_params, Branch, DualBranchModel, Encoder, ForwardOutputs, MlpHead, OnlineBranch, PixelDecoder, RepDecoder,
    TargetBranch, TargetView,
};
pub use nn::Params;

use crate::error::{Error, Result};

/// Cosine schedule for the EMA momentum, rising from `tau_base` to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaSchedule {
    pub tau_base: f64,
    pub total_steps: usize,
}

impl EmaSchedule {
    pub fn new(tau_base: f64, total_steps: usize) -> Result<Self> {
        let s = EmaSchedule { tau_base, total_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_base) {
            return Err(Error::Config(format!("tau_base {} outside [0, 1]", self.tau_base)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("EMA schedule needs at least one step".into()));
        }
        Ok(())
    }

    /// `τ(k) = 1 − (1 − τ_base)·(cos(πk/K) + 1)/2`, clamped at `k = K`.
    pub fn tau(&self, step: usize) -> f64 {
        let k = step.min(self.total_steps) as f64;
        let progress = (std::f64::consts::PI * k / self.total_steps as f64).cos();
        1.0 - (1.0 - self.tau_base) * (progress + 1.0) / 2.0
    }
}

impl DualBranchModel {
    /// EMA update with the scheduled momentum for `step`.
    pub fn ema_update_scheduled(&self, schedule: &EmaSchedule, step: usize) -> Result<()> {
        if step >= schedule.total_steps {
            return Err(Error::Config(format!(
                "EMA step {step} beyond schedule length {}",
                schedule.total_steps
            )));
        }
        self.ema_update(schedule.tau(step))
    }
}
