use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warmup-stable-decay learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsdSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub end_lr: f64,
    /// Fraction of the post-warmup steps spent at `peak_lr`.
    pub stable_fraction: f64,
}

impl WsdSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > self.end_lr && self.end_lr > 0.0) {
            return Err(Error::config("peak_lr/end_lr", "need peak_lr > end_lr > 0"));
        }
        if !(0.0..1.0).contains(&self.stable_fraction) {
            return Err(Error::config("stable_fraction", "must be in [0, 1)"));
        }
        let b = self.stable_end();
        if !(self.warmup_steps < b && b < self.total_steps) && !(self.warmup_steps == b && self.stable_fraction == 0.0) {
            return Err(Error::config(
                "warmup_steps",
                format!(
                    "need warmup ({}) < stable boundary ({b}) < total ({})",
                    self.warmup_steps, self.total_steps
                ),
            ));
        }
        Ok(())
    }

    /// Last step of the constant segment.
    pub fn stable_end(&self) -> usize {
        let rest = self.total_steps.saturating_sub(self.warmup_steps);
        self.warmup_steps + (self.stable_fraction * rest as f64).floor() as usize
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::range("step", format!("{step} > total_steps {}", self.total_steps)));
        }
        let b = self.stable_end();
        Ok(if step < self.warmup_steps {
            self.peak_lr * (step as f64 / self.warmup_steps as f64)
        } else if step <= b {
            self.peak_lr
        } else {
            let left = (self.total_steps - step) as f64 / (self.total_steps - b) as f64;
            self.end_lr + (self.peak_lr - self.end_lr) * left
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> WsdSchedule {
        WsdSchedule {
            total_steps: 100_000,
            warmup_steps: 1500,
            peak_lr: 3e-4,
            end_lr: 3e-5,
            stable_fraction: 0.8,
        }
    }

    #[test]
    fn anchor_values() {
        let s = reference();
        s.validate().unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(750).unwrap(), 1.5e-4);
        assert_eq!(s.lr_at(1500).unwrap(), 3e-4);
        assert_eq!(s.lr_at(100_000).unwrap(), 3e-5);
        assert_eq!(s.stable_end(), 80_300);
        assert_eq!(s.lr_at(80_300).unwrap(), 3e-4);
        assert!(s.lr_at(80_301).unwrap() < 3e-4);
        assert!(s.lr_at(100_001).is_err());
    }

    #[test]
    fn invalid_schedules() {
        let mut s = reference();
        s.end_lr = 4e-4;
        assert!(s.validate().is_err());
        let mut s = reference();
        s.warmup_steps = 100_000;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn continuous_and_piecewise_linear(step in 0usize..100_000) {
            let s = reference();
            let a = s.lr_at(step).unwrap();
            let b = s.lr_at(step + 1).unwrap();
            // max slope is in warmup: peak / warmup per step
            prop_assert!((a - b).abs() <= 3e-4 / 1500.0 + 1e-18);
            prop_assert!((0.0..=3e-4).contains(&a));
        }
    }
}
