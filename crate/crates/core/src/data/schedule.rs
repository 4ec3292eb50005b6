use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from `0.1·base_lr` at epoch 0 to `base_lr` at `warmup_epochs`, constant after.
///
/// The ratio is formed from integers, `(W + 9e) / 10W`, so both endpoints are exact.
pub fn warmup_lr(epoch: usize, base_lr: f64, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 || epoch >= warmup_epochs {
        return base_lr;
    }
    base_lr * ((warmup_epochs + 9 * epoch) as f64 / (10 * warmup_epochs) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Epochs at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 3.5e-4,
            warmup_epochs: 10,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        warmup_lr(epoch, self.base_lr, self.warmup_epochs) * self.decay_factor.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("schedule.base_lr", "must be a non-negative number"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("schedule.decay_factor", "must lie in (0, 1]"));
        }
        Ok(())
    }
}
