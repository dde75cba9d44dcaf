//! Learning-rate, teacher-momentum and temperature schedules.

use crate::error::{Error, Result};

/// Half-cosine from `start` at `step = 0` to `end` at `step = total`.
pub fn cosine_value(step: u64, total: u64, start: f32, end: f32) -> Result<f32> {
    if total == 0 {
        return Err(Error::Contract("cosine schedule over zero steps".into()));
    }
    let t = step.min(total) as f64 / total as f64;
    let (s, e) = (start as f64, end as f64);
    Ok((e + 0.5 * (s - e) * (1.0 + (std::f64::consts::PI * t).cos())) as f32)
}

/// Linear ramp `start → end` over `warmup_epochs`, constant afterwards.
pub fn temperature_tau_g(epoch: u64, start: f32, end: f32, warmup_epochs: u64) -> f32 {
    if warmup_epochs == 0 || epoch >= warmup_epochs {
        return end;
    }
    let f = epoch as f64 / warmup_epochs as f64;
    (start as f64 + (end as f64 - start as f64) * f) as f32
}

/// Linear warm-up from `warmup_start` to `base` over `warmup_steps`, then
/// cosine decay to `final_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f32,
    pub final_lr: f32,
    pub warmup_start: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> Result<f32> {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            let (a, b) = (self.warmup_start as f64, self.base as f64);
            return Ok((a + (b - a) * f) as f32);
        }
        cosine_value(
            step - self.warmup_steps,
            self.total_steps - self.warmup_steps,
            self.base,
            self.final_lr,
        )
    }
}
