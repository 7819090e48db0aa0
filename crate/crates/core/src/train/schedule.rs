use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup followed by cosine annealing, in (fractional) epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub min_lr: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            base_lr: 4e-4,
            warmup_epochs: 40.0,
            total_epochs: 440.0,
            min_lr: 0.0,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.min_lr >= 0.0
            && self.min_lr <= self.base_lr
            && self.warmup_epochs >= 0.0
            && self.warmup_epochs < self.total_epochs;
        if ok {
            Ok(())
        } else {
            Err(Error::arg(
                "schedule",
                format!("need 0 <= warmup < total and 0 <= min_lr <= base_lr, got {self:?}"),
            ))
        }
    }

    /// The default schedule with the warmup share preserved over `total` epochs.
    pub fn scaled_to(total_epochs: usize) -> Self {
        let d = Self::default();
        let total = total_epochs as f64;
        Self {
            warmup_epochs: (d.warmup_epochs / d.total_epochs * total).round().min(total - 1.0).max(0.0),
            total_epochs: total,
            ..d
        }
    }
}

/// Learning rate at a fractional epoch.
///
/// Warmup rises linearly from `base/warmup` at epoch 0 to `base` at the end
/// of warmup; the cosine phase then decays to `min_lr` at `total_epochs`.
pub fn lr_at(epoch: f64, spec: &ScheduleSpec) -> Result<f64> {
    spec.validate()?;
    if !(0.0..=spec.total_epochs).contains(&epoch) {
        return Err(Error::ScheduleRange {
            epoch,
            total: spec.total_epochs,
        });
    }
    let w = spec.warmup_epochs;
    if epoch < w {
        let start = spec.base_lr / w;
        return Ok(start + (spec.base_lr - start) * epoch / w);
    }
    let progress = (epoch - w) / (spec.total_epochs - w);
    Ok(spec.min_lr + 0.5 * (spec.base_lr - spec.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchor_points() {
        let s = ScheduleSpec::default();
        assert!((lr_at(0.0, &s).unwrap() - 1e-5).abs() < 1e-12);
        assert!((lr_at(40.0, &s).unwrap() - 4e-4).abs() < 1e-12);
        assert!((lr_at(240.0, &s).unwrap() - 2e-4).abs() < 1e-12);
        assert!((lr_at(440.0, &s).unwrap() - 0.0).abs() < 1e-12);
        let below = lr_at(40.0 - 1e-9, &s).unwrap();
        assert!((below - 4e-4).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_is_an_error() {
        let s = ScheduleSpec::default();
        assert!(matches!(lr_at(-0.5, &s), Err(Error::ScheduleRange { .. })));
        assert!(matches!(lr_at(441.0, &s), Err(Error::ScheduleRange { .. })));
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        let s = ScheduleSpec {
            warmup_epochs: 0.0,
            total_epochs: 10.0,
            ..Default::default()
        };
        assert_eq!(lr_at(0.0, &s).unwrap(), 4e-4);
    }

    #[test]
    fn scaled_schedule_keeps_warmup_share() {
        let s = ScheduleSpec::scaled_to(220);
        assert_eq!(s.warmup_epochs, 20.0);
        assert_eq!(s.total_epochs, 220.0);
    }
}
