//! OneCycle learning-rate schedule with linear warmup and cosine decay.

use super::TrainError;

pub const START_DIV: f64 = 25.0;
pub const FINAL_DIV: f64 = 2500.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl OneCycle {
    /// Warmup covers the first `round(warmup_fraction * total_steps)` steps.
    pub fn new(max_lr: f64, total_steps: usize, warmup_fraction: f64) -> Result<Self, TrainError> {
        if !(max_lr > 0.0 && max_lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("max_lr must be positive, got {max_lr}")));
        }
        if total_steps == 0 {
            return Err(TrainError::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(TrainError::InvalidConfig(format!(
                "warmup fraction {warmup_fraction} outside [0, 1)"
            )));
        }
        let warmup_steps = ((warmup_fraction * total_steps as f64).round() as usize).min(total_steps - 1);
        Ok(OneCycle {
            max_lr,
            total_steps,
            warmup_steps,
        })
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / START_DIV
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / FINAL_DIV
    }

    /// Rises linearly from `max_lr / 25` at step 0 to exactly `max_lr` at
    /// step `warmup_steps`, then follows a half cosine down to `max_lr / 2500`
    /// at the last step.
    pub fn lr(&self, step: usize) -> Result<f64, TrainError> {
        if step >= self.total_steps {
            return Err(TrainError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let w = self.warmup_steps;
        if step < w {
            let start = self.initial_lr();
            return Ok(start + (self.max_lr - start) * step as f64 / w as f64);
        }
        if step == w {
            return Ok(self.max_lr);
        }
        let span = (self.total_steps - 1 - w) as f64;
        let t = (step - w) as f64 / span;
        let end = self.final_lr();
        Ok(end + (self.max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}
