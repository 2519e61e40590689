//! Optimization: Eq.-1 loss assembly, Adam with warmup scheduling,
//! parameter-group freezing, and the deterministic training loop.

pub mod adam;
pub mod loss;
mod trainer;

pub use adam::Adam;
pub use loss::{compute_loss, LossAccum, LossBreakdown, LossVars};
pub use trainer::{eval_loss, refine, train, RefineStrategy, StepLoss, TrainOutcome};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::ParamGroup;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f32,
    pub beta: f32,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub frozen_groups: BTreeSet<ParamGroup>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            lr_scale: 1.0,
            warmup_steps: 200,
            max_steps: 2000,
            batch_size: 8,
            seed: 42,
            frozen_groups: BTreeSet::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be positive: alpha {}, beta {}",
                self.alpha, self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Warmup-then-inverse-sqrt learning rate (1-based step).
    pub fn learning_rate(&self, d_model: usize, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.lr_scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let cfg = TrainConfig {
            warmup_steps: 100,
            ..Default::default()
        };
        let lr = |s| cfg.learning_rate(64, s);
        assert!(lr(1) < lr(50));
        assert!(lr(50) < lr(100));
        assert!(lr(100) > lr(400));
        let peak = lr(100);
        assert!((peak - 1.0 / (64.0f64.sqrt() * 100.0f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
