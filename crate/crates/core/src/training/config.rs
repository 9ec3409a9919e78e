use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{key_path, Error};
use crate::numerics::{AdamW, ScheduleConfig};

/// Optimisation and data settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub total_steps: usize,
    /// `schedule.total_steps` must equal `total_steps`.
    pub schedule: ScheduleConfig,
    pub adamw: AdamW,
    /// Global gradient-norm clip; 0 (the default) disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Files or directories; directories are read recursively.
    pub corpus: Vec<PathBuf>,
    /// Training windows prefer documents at least this many training
    /// lengths long.
    pub min_doc_multiple: usize,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// Evaluate on the validation split every this many steps (0: never).
    pub eval_every: usize,
    pub eval_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            grad_accum_steps: 1,
            total_steps: 1000,
            schedule: ScheduleConfig::default(),
            adamw: AdamW::default(),
            grad_clip: 0.0,
            seed: 0,
            corpus: vec![PathBuf::from("data/gutenberg")],
            min_doc_multiple: 16,
            checkpoint_every: 0,
            eval_every: 0,
            eval_windows: 16,
        }
    }
}

impl TrainConfig {
    /// Sets `total_steps` everywhere it appears.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.total_steps = steps;
        self.schedule.total_steps = steps;
        self
    }

    pub fn validate(&self, prefix: &str) -> Vec<Error> {
        let key = |k: &str| key_path(prefix, k);
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push(Error::config(key("batch_size"), "must be >= 1"));
        }
        if self.grad_accum_steps == 0 {
            errs.push(Error::config(key("grad_accum_steps"), "must be >= 1"));
        }
        if self.schedule.total_steps != self.total_steps {
            errs.push(Error::config(
                key("schedule.total_steps"),
                format!("must equal total_steps ({})", self.total_steps),
            ));
        }
        errs.extend(self.schedule.validate(&key("schedule")));
        let a = &self.adamw;
        for (name, v) in [("beta1", a.beta1), ("beta2", a.beta2)] {
            if !(0.0..1.0).contains(&v) {
                errs.push(Error::config(key(&format!("adamw.{name}")), "must be in [0, 1)"));
            }
        }
        if !(a.eps > 0.0) {
            errs.push(Error::config(key("adamw.eps"), "must be > 0"));
        }
        if !(a.weight_decay >= 0.0) {
            errs.push(Error::config(key("adamw.weight_decay"), "must be >= 0"));
        }
        if !(self.grad_clip >= 0.0) {
            errs.push(Error::config(key("grad_clip"), "must be >= 0"));
        }
        if self.corpus.is_empty() {
            errs.push(Error::config(key("corpus"), "needs at least one path"));
        }
        if self.eval_every > 0 && self.eval_windows == 0 {
            errs.push(Error::config(key("eval_windows"), "must be >= 1 when eval_every is set"));
        }
        errs
    }
}
