use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::report::{EvalReport, EvalRow, ReportMeta};
use super::sweep::{extrapolation_sweep, SweepOptions};
use crate::error::{Error, Result};
use crate::positional::{Encoding, LearnedMode};
use crate::training::{load_checkpoint, train, TokenStream, TrainConfig, TrainState};
use crate::transformer::{Model, ModelConfig};

/// The ExPE ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Baseline,
    StableP,
    L1,
    Once,
    Learned,
    LearnedInitialized,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Baseline,
        AblationVariant::StableP,
        AblationVariant::L1,
        AblationVariant::LearnedInitialized,
        AblationVariant::Learned,
        AblationVariant::Once,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::StableP => "stable_p",
            AblationVariant::L1 => "l1",
            AblationVariant::Once => "once",
            AblationVariant::Learned => "learned",
            AblationVariant::LearnedInitialized => "learned_initialized",
        }
    }

    /// `base` (an ExPE config) with this variant's change applied.
    pub fn apply(self, base: &ModelConfig) -> Result<ModelConfig> {
        let Encoding::Expe(mut p) = base.encoding else {
            return Err(Error::UnsupportedScheme {
                op: "ablation_suite",
                scheme: base.encoding.name().to_string(),
            });
        };
        let mut cfg = base.clone();
        cfg.ablation = Default::default();
        match self {
            AblationVariant::Baseline => {}
            AblationVariant::StableP => cfg.ablation.stable_p = true,
            AblationVariant::L1 => {
                p.l = 1;
                cfg.encoding = Encoding::Expe(p);
            }
            AblationVariant::Once => cfg.ablation.apply_once = true,
            AblationVariant::Learned => cfg.ablation.learned_params = LearnedMode::LearnedRandom,
            AblationVariant::LearnedInitialized => {
                cfg.ablation.learned_params = LearnedMode::LearnedInitialized
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: AblationVariant,
    pub report: EvalReport,
    /// Training wall-clock divided by the baseline's.
    pub relative_time: f64,
    pub wall_ms: u64,
    pub final_train_loss: Option<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub multiples: Vec<usize>,
    pub n_windows: usize,
    pub eval_seed: u64,
    /// Per-variant artifacts go to `<out>/<tag>/`.
    pub out: Option<PathBuf>,
    /// Reuse a finished variant found in `out` when its configs match.
    pub reuse: bool,
    pub metadata: ReportMeta,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            multiples: vec![1, 2, 4],
            n_windows: 64,
            eval_seed: 0,
            out: None,
            reuse: false,
            metadata: ReportMeta {
                git_describe: "unknown".into(),
                config_hash: String::new(),
                timestamp_unix: 0,
            },
        }
    }
}

/// Summary written next to each variant's checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunSummary {
    model: ModelConfig,
    train: TrainConfig,
    wall_ms: u64,
    final_train_loss: Option<f64>,
    diverged: bool,
}

struct Trained {
    model: Option<Model<f32>>,
    wall_ms: u64,
    final_train_loss: Option<f64>,
    diverged: bool,
}

fn train_variant(cfg: &ModelConfig, tc: &TrainConfig, data: &TokenStream, opts: &AblationOptions, tag: &str) -> Result<Trained> {
    let dir = opts.out.as_ref().map(|o| o.join(tag));
    if let (true, Some(dir)) = (opts.reuse, &dir) {
        if let Ok(raw) = fs::read(dir.join("run.json")) {
            if let Ok(s) = serde_json::from_slice::<RunSummary>(&raw) {
                if s.model == *cfg && s.train == *tc {
                    let model = if s.diverged {
                        None
                    } else {
                        Some(load_checkpoint(&dir.join("final.bin"))?.model)
                    };
                    log::info!("reusing trained variant {tag}");
                    return Ok(Trained {
                        model,
                        wall_ms: s.wall_ms,
                        final_train_loss: s.final_train_loss,
                        diverged: s.diverged,
                    });
                }
            }
        }
    }
    let model = Model::<f32>::new(cfg.clone(), tc.seed)?;
    let started = std::time::Instant::now();
    let result = train(TrainState::new(model, tc.seed), tc, data, None, dir.as_deref());
    let trained = match result {
        Ok(run) => Trained {
            final_train_loss: run.metrics.last().map(|m| m.train_loss),
            model: Some(run.state.model),
            wall_ms: run.wall_ms,
            diverged: false,
        },
        Err(Error::NonFinite { last_finite_loss, .. }) => Trained {
            model: None,
            wall_ms: started.elapsed().as_millis() as u64,
            final_train_loss: last_finite_loss,
            diverged: true,
        },
        Err(e) => return Err(e),
    };
    if let Some(dir) = &dir {
        fs::create_dir_all(dir)?;
        let s = RunSummary {
            model: cfg.clone(),
            train: tc.clone(),
            wall_ms: trained.wall_ms,
            final_train_loss: trained.final_train_loss,
            diverged: trained.diverged,
        };
        fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&s)?)?;
    }
    Ok(trained)
}

/// Trains every variant from the same seed and evaluates it at
/// `opts.multiples`. A variant that diverges keeps its last finite training
/// loss in every row, flagged `diverged`.
pub fn ablation_suite(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train_stream: &TokenStream,
    eval_stream: &TokenStream,
    opts: &AblationOptions,
) -> Result<Vec<AblationRun>> {
    let configs = AblationVariant::ALL
        .iter()
        .map(|v| Ok((*v, v.apply(base)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut runs = Vec::with_capacity(configs.len());
    for (variant, cfg) in configs {
        log::info!("ablation variant {}", variant.tag());
        let t = train_variant(&cfg, train_cfg, train_stream, opts, variant.tag())?;
        let sweep = SweepOptions {
            model_tag: variant.tag().to_string(),
            n_windows: opts.n_windows,
            seed: opts.eval_seed,
            metadata: opts.metadata.clone(),
        };
        let report = match &t.model {
            Some(m) => extrapolation_sweep(m, eval_stream, &opts.multiples, &[1.0], &sweep)?,
            None => diverged_report(&cfg, variant.tag(), t.final_train_loss, &opts.multiples, &sweep),
        };
        runs.push(AblationRun {
            variant,
            report,
            relative_time: 0.0,
            wall_ms: t.wall_ms,
            final_train_loss: t.final_train_loss,
            diverged: t.diverged,
        });
    }
    let base_ms = runs[0].wall_ms.max(1) as f64;
    for r in &mut runs {
        r.relative_time = r.wall_ms.max(1) as f64 / base_ms;
    }
    runs[0].relative_time = 1.0;
    Ok(runs)
}

fn diverged_report(
    cfg: &ModelConfig,
    tag: &str,
    last: Option<f64>,
    multiples: &[usize],
    opts: &SweepOptions,
) -> EvalReport {
    let rows = multiples
        .iter()
        .map(|&m| EvalRow {
            model: tag.to_string(),
            encoding: cfg.encoding.name().to_string(),
            scale: 1.0,
            multiple: m,
            eval_len: m * cfg.seq_len,
            loss_nats: last,
            stderr: None,
            tokens: 0,
            seed: opts.seed,
            diverged: true,
            error: Some("training diverged".into()),
        })
        .collect();
    EvalReport::new(cfg.seq_len, rows, opts.metadata.clone())
}
