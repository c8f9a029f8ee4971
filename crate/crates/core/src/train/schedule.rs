use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearWarmupDecay,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Length of the decay; `None` lets the trainer use the planned step count.
    pub total_steps: Option<u64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::LinearWarmupDecay,
            peak_lr: 0.005,
            warmup_steps: 2000,
            total_steps: None,
        }
    }
}

impl ScheduleConfig {
    pub fn constant(lr: f64) -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Constant,
            peak_lr: lr,
            warmup_steps: 0,
            total_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!("schedule.peak_lr {} must be positive", self.peak_lr)));
        }
        if let (ScheduleKind::LinearWarmupDecay, Some(t)) = (self.kind, self.total_steps) {
            if self.warmup_steps > t {
                return Err(Error::Config(format!(
                    "schedule.warmup_steps {} exceeds total_steps {t}",
                    self.warmup_steps
                )));
            }
        }
        Ok(())
    }
}

/// Learning rate for optimizer update number `step` (the first update is 1).
///
/// Linear kind: `peak · min(step / warmup, (total − step) / (total − warmup))`,
/// floored at zero. Constant kind: `peak`.
pub fn lr_at(step: u64, cfg: &ScheduleConfig, planned_total: u64) -> f64 {
    match cfg.kind {
        ScheduleKind::Constant => cfg.peak_lr,
        ScheduleKind::LinearWarmupDecay => {
            let total = cfg.total_steps.unwrap_or(planned_total) as f64;
            let (s, w) = (step as f64, cfg.warmup_steps as f64);
            let up = if w > 0.0 { s / w } else { 1.0 };
            let down = if total > w { (total - s) / (total - w) } else { 1.0 };
            (cfg.peak_lr * up.min(down)).max(0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_run() -> ScheduleConfig {
        ScheduleConfig {
            total_steps: Some(10_000),
            ..Default::default()
        }
    }

    #[test]
    fn warmup_boundary() {
        let c = full_run();
        assert_eq!(lr_at(0, &c, 0), 0.0);
        assert!((lr_at(1, &c, 0) - 0.005 / 2000.0).abs() < 1e-15);
        assert!((lr_at(2000, &c, 0) - 0.005).abs() < 1e-15);
        assert_eq!(lr_at(10_000, &c, 0), 0.0);
        assert_eq!(lr_at(20_000, &c, 0), 0.0);
    }

    #[test]
    fn continuous_at_warmup() {
        let c = full_run();
        let left = lr_at(1999, &c, 0);
        let right = lr_at(2001, &c, 0);
        assert!((left - 0.005).abs() < 1e-5 && (right - 0.005).abs() < 1e-5);
    }

    #[test]
    fn constant_is_constant() {
        let c = ScheduleConfig::constant(5e-5);
        for s in [0, 1, 100, 1_000_000] {
            assert_eq!(lr_at(s, &c, 10), 5e-5);
        }
    }

    #[test]
    fn planned_total_is_used_when_unset() {
        let c = ScheduleConfig {
            warmup_steps: 10,
            ..Default::default()
        };
        assert_eq!(lr_at(100, &c, 100), 0.0);
        assert!(lr_at(50, &c, 100) > 0.0);
    }

    #[test]
    fn warmup_longer_than_total_is_rejected() {
        let c = ScheduleConfig {
            total_steps: Some(10),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
