use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            warmup_start_lr: 1e-6,
            warmup_epochs: 5,
            total_epochs: 60,
            steps_per_epoch: 1,
        }
    }
}

impl LrSchedule {
    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs.min(self.total_epochs) * self.steps_per_epoch
    }
}

pub fn lr_at(step: usize, sched: &LrSchedule) -> Result<f64> {
    let total = sched.total_steps();
    if step >= total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let warmup = sched.warmup_steps();
    if step < warmup {
        let frac = step as f64 / warmup as f64;
        return Ok(sched.warmup_start_lr + (sched.base_lr - sched.warmup_start_lr) * frac);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(sched.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            steps_per_epoch: 10,
            ..LrSchedule::default()
        }
    }

    #[test]
    fn warmup_starts_at_floor() {
        assert_eq!(lr_at(0, &sched()).unwrap(), 1e-6);
    }

    #[test]
    fn first_post_warmup_step_is_base() {
        assert_eq!(lr_at(50, &sched()).unwrap(), 1e-5);
    }

    #[test]
    fn cosine_midpoint_halves() {
        // post-warmup span is 550 steps
        let lr = lr_at(50 + 275, &sched()).unwrap();
        assert!((lr - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn continuous_and_non_increasing_after_warmup() {
        let s = sched();
        let before = lr_at(49, &s).unwrap();
        let at = lr_at(50, &s).unwrap();
        assert!(at - before <= (s.base_lr - s.warmup_start_lr) / 50.0 + 1e-18);
        let mut prev = at;
        for step in 51..s.total_steps() {
            let lr = lr_at(step, &s).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn out_of_range() {
        assert!(matches!(
            lr_at(600, &sched()),
            Err(Error::StepOutOfRange { step: 600, total: 600 })
        ));
    }
}
