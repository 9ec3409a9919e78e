use serde::{Deserialize, Serialize};

use crate::error::{key_path, Error, Result};

/// Linear warmup followed by cosine decay to `end_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub end_lr: f64,
    pub total_steps: usize,
    pub warmup_ratio: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            end_lr: 1e-4,
            total_steps: 1000,
            warmup_ratio: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self, prefix: &str) -> Vec<Error> {
        let mut errs = Vec::new();
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            errs.push(Error::config(
                key_path(prefix, "warmup_ratio"),
                format!("must be in [0, 1), got {}", self.warmup_ratio),
            ));
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            errs.push(Error::config(key_path(prefix, "peak_lr"), "must be positive"));
        }
        if !(self.end_lr >= 0.0) || self.end_lr > self.peak_lr {
            errs.push(Error::config(
                key_path(prefix, "end_lr"),
                format!("must be in [0, peak_lr], got {}", self.end_lr),
            ));
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        match self.validate("schedule").into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }
}

/// Learning rate at `step`; steps past `total_steps` clamp to `end_lr`.
pub fn cosine_schedule(step: usize, cfg: &ScheduleConfig) -> f64 {
    let warm = cfg.warmup_steps();
    if step >= cfg.total_steps {
        return if cfg.total_steps == warm { cfg.peak_lr } else { cfg.end_lr };
    }
    if step < warm {
        return cfg.peak_lr * step as f64 / warm as f64;
    }
    let progress = (step - warm) as f64 / (cfg.total_steps - warm) as f64;
    cfg.end_lr + (cfg.peak_lr - cfg.end_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
