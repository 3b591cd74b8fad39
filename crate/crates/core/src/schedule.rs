//! Residual-bound curriculum and learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub s_min: f64,
    pub s_max: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr_encoder: f64,
    pub base_lr_decoder: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub batch_size_effective: usize,
    /// Per-step batch; gradients are accumulated up to the effective size.
    pub batch_size_device: usize,
}

impl ScheduleConfig {
    pub fn paper() -> Self {
        Self {
            s_min: 15.0,
            s_max: 80.0,
            total_epochs: 300,
            warmup_epochs: 10,
            base_lr_encoder: 3e-5,
            base_lr_decoder: 1e-4,
            poly_power: 0.9,
            weight_decay: 0.01,
            batch_size_effective: 32,
            batch_size_device: 8,
        }
    }

    pub fn desk() -> Self {
        Self {
            total_epochs: 60,
            warmup_epochs: 2,
            base_lr_encoder: 3e-4,
            base_lr_decoder: 1e-3,
            batch_size_effective: 16,
            batch_size_device: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GpError::Config(m.into()));
        if !(self.s_min > 0.0 && self.s_min <= self.s_max) {
            return bad("need 0 < s_min <= s_max");
        }
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return bad("need warmup_epochs < total_epochs");
        }
        if self.batch_size_device == 0 || self.batch_size_effective % self.batch_size_device != 0 {
            return bad("batch_size_effective must be a positive multiple of batch_size_device");
        }
        if self.base_lr_encoder < 0.0 || self.base_lr_decoder < 0.0 || self.weight_decay < 0.0 {
            return bad("learning rates and weight decay must be nonnegative");
        }
        Ok(())
    }
}

/// `s(e) = s_min + (s_max - s_min) * e / (E - 1)`, clamped to the last epoch;
/// a single-epoch run uses `s_max`.
pub fn residual_bound_schedule(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    let e_last = cfg.total_epochs.saturating_sub(1);
    if e_last == 0 {
        return cfg.s_max;
    }
    let e = epoch.min(e_last);
    if e == e_last {
        return cfg.s_max;
    }
    cfg.s_min + (cfg.s_max - cfg.s_min) * e as f64 / e_last as f64
}

/// Linear warmup from 0 to `base_lr`, then polynomial decay to 0.
pub fn poly_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, power: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let frac = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * (1.0 - frac).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(e: usize) -> ScheduleConfig {
        ScheduleConfig { total_epochs: e, ..ScheduleConfig::paper() }
    }

    #[test]
    fn ramp_examples() {
        let c = cfg(300);
        assert_eq!(residual_bound_schedule(0, &c), 15.0);
        assert_eq!(residual_bound_schedule(299, &c), 80.0);
        assert!((residual_bound_schedule(150, &c) - 47.6087).abs() < 1e-4);
        assert_eq!(residual_bound_schedule(0, &cfg(1)), 80.0);
    }

    #[test]
    fn ramp_is_nondecreasing() {
        let c = cfg(37);
        let s: Vec<f64> = (0..37).map(|e| residual_bound_schedule(e, &c)).collect();
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(10, 100, 10, 0.5, 0.9), 0.5);
        assert_eq!(poly_lr(100, 100, 10, 0.5, 0.9), 0.0);
        assert_eq!(poly_lr(0, 100, 10, 0.5, 0.9), 0.0);
        assert!((poly_lr(55, 100, 10, 1.0, 0.9) - 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((0.5f64.powf(0.9) - 0.53589).abs() < 1e-5);
    }

    #[test]
    fn validation() {
        assert!(ScheduleConfig::paper().validate().is_ok());
        assert!(ScheduleConfig::desk().validate().is_ok());
        assert!(ScheduleConfig { warmup_epochs: 300, ..ScheduleConfig::paper() }.validate().is_err());
        assert!(ScheduleConfig { s_min: 90.0, ..ScheduleConfig::paper() }.validate().is_err());
    }
}
