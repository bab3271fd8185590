//! Learning-rate schedule: linear warmup then cosine decay, with the
//! linear scaling rule peak = base_lr * batch_size / 256.

use crate::error::{HpmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn peak(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    /// Learning rate at a (possibly fractional) epoch. Warmup rises
    /// linearly from 0 to the peak; the cosine phase decays to floor_lr at
    /// total_epochs. Continuous at the warmup boundary.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(0.0..=self.total_epochs).contains(&epoch) {
            return Err(HpmError::Contract(format!(
                "epoch {epoch} outside [0, {}]",
                self.total_epochs
            )));
        }
        let peak = self.peak();
        if epoch < self.warmup_epochs {
            return Ok(peak * epoch / self.warmup_epochs);
        }
        let span = self.total_epochs - self.warmup_epochs;
        if span <= 0.0 {
            return Ok(peak);
        }
        let progress = (epoch - self.warmup_epochs) / span;
        Ok(self.floor_lr
            + (peak - self.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            base_lr: 1.5e-4,
            batch_size: 256,
            warmup_epochs: 5.0,
            total_epochs: 100.0,
            floor_lr: 0.0,
        }
    }

    #[test]
    fn peak_reached_at_warmup_end() {
        let s = sched();
        assert!((s.lr_at(5.0).unwrap() - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn linear_scaling_rule() {
        let s = LrSchedule { batch_size: 512, ..sched() };
        assert!((s.peak() - 3.0e-4).abs() < 1e-18);
    }

    #[test]
    fn cosine_endpoint_hits_floor() {
        let s = sched();
        assert_eq!(s.lr_at(100.0).unwrap(), 0.0);
        let f = LrSchedule { floor_lr: 1e-6, ..sched() };
        assert!((f.lr_at(100.0).unwrap() - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = sched();
        let mut delta = 1e-3;
        while delta > 1e-10 {
            let lo = s.lr_at(5.0 - delta).unwrap();
            let hi = s.lr_at(5.0 + delta).unwrap();
            assert!((lo - hi).abs() < 1e-2 * delta.max(1e-9), "gap at delta {delta}");
            delta /= 10.0;
        }
    }

    #[test]
    fn epoch_out_of_range_rejected() {
        let s = sched();
        assert!(s.lr_at(-0.1).is_err());
        assert!(s.lr_at(100.5).is_err());
    }
}
