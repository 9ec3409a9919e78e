use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::data::{TokenStream, WindowSampler};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluation::eval_loss;
use crate::numerics::{cosine_schedule, derived_rng, AdamWState, LabRng, RngState, Scalar};
use crate::transformer::Model;

/// Model, optimizer moments, step counter and the run's RNG.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub model: Model<S>,
    pub optimizer: Vec<AdamWState<S>>,
    pub step: usize,
    pub rng: LabRng,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: Model<S>, seed: u64) -> Self {
        let optimizer = model.params().iter().map(|p| AdamWState::new(p.tensor.len())).collect();
        Self {
            model,
            optimizer,
            step: 0,
            rng: derived_rng(seed, "train"),
        }
    }

    /// Snapshot in the on-disk precision (f32).
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let cast = |v: &[S]| v.iter().map(|x| x.to_f64() as f32).collect();
        Checkpoint {
            model: self.model.cast(),
            train: cfg.clone(),
            optimizer: if self.step == 0 {
                Vec::new()
            } else {
                self.optimizer
                    .iter()
                    .map(|s| AdamWState {
                        m: cast(&s.m),
                        v: cast(&s.v),
                        t: s.t,
                    })
                    .collect()
            },
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }
}

impl TrainState<f32> {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut state = Self::new(ckpt.model, ckpt.train.seed);
        if !ckpt.optimizer.is_empty() {
            state.optimizer = ckpt.optimizer;
        }
        state.step = ckpt.step;
        state.rng = ckpt
            .rng
            .restore()
            .ok_or_else(|| Error::Corrupt("unreadable rng state".into()))?;
        Ok(state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

/// One optimizer update over `grad_accum_steps` micro-batches of
/// `batch_size` rows each; gradients are averaged across micro-batches.
pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    cfg: &TrainConfig,
    sampler: &WindowSampler<'_>,
) -> Result<StepMetrics> {
    let step = state.step;
    let lr = cosine_schedule(step, &cfg.schedule);
    let accum = cfg.grad_accum_steps;
    let scale = S::from_f64(1.0 / accum as f64);
    state.model.zero_grads();
    let mut loss_sum = 0.0;
    for a in 0..accum {
        let rows = a * cfg.batch_size..(a + 1) * cfg.batch_size;
        let batch = sampler.batch(cfg.seed, step as u64, rows);
        let dropout_seed: u64 = state.rng.gen();
        let dropout = (state.model.config().dropout > 0.0).then_some(dropout_seed);
        let loss = state
            .model
            .loss_and_grads(&batch.inputs, &batch.targets, batch.rows, scale, dropout)?;
        loss_sum += loss.to_f64();
    }
    let train_loss = loss_sum / accum as f64;
    let grad_norm = state
        .model
        .params()
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flatten()
        .map(|g| g.to_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if !train_loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step,
            lr,
            grad_norm,
            last_finite_loss: None,
        });
    }
    let clip = if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        Some(S::from_f64(cfg.grad_clip / grad_norm))
    } else {
        None
    };
    for (p, st) in state.model.params_mut().iter_mut().zip(state.optimizer.iter_mut()) {
        let mut g = p.tensor.grad().map(<[S]>::to_vec).unwrap_or_else(|| vec![S::ZERO; p.tensor.len()]);
        if let Some(c) = clip {
            g.iter_mut().for_each(|x| *x *= c);
        }
        let decay = p.decay;
        cfg.adamw.step(p.tensor.data_mut(), &g, st, lr, decay);
    }
    state.model.zero_grads();
    state.step += 1;
    Ok(StepMetrics {
        step,
        lr,
        train_loss,
        grad_norm,
        wall_ms: 0,
    })
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainRun<S> {
    pub state: TrainState<S>,
    pub metrics: Vec<StepMetrics>,
    /// `(step, validation loss)` pairs.
    pub evals: Vec<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
    /// Training windows came from the concatenated stream.
    pub fallback: bool,
    pub wall_ms: u64,
}

#[derive(Serialize)]
struct Divergence {
    step: usize,
    lr: f64,
    grad_norm: f64,
    last_finite_loss: Option<f64>,
    param_norms: Vec<(String, f64)>,
}

/// Runs `state` up to `cfg.total_steps`. With `out`, writes `metrics.csv`,
/// `eval.csv` (when evaluating), `checkpoint-{step}.bin` on cadence and
/// `final.bin`; on divergence, `divergence.json`.
pub fn train<S: Scalar>(
    mut state: TrainState<S>,
    cfg: &TrainConfig,
    data: &TokenStream,
    val: Option<&TokenStream>,
    out: Option<&Path>,
) -> Result<TrainRun<S>> {
    if let Some(e) = cfg.validate("training").into_iter().next() {
        return Err(e);
    }
    let seq_len = state.model.config().seq_len;
    let sampler = WindowSampler::new(data, seq_len, cfg.min_doc_multiple * seq_len)?;
    if sampler.fallback() {
        log::warn!("no document reaches {} tokens; sampling from the concatenated stream", cfg.min_doc_multiple * seq_len);
    }
    let mut metrics_file = None;
    let mut eval_file = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(f, "step,lr,train_loss,wall_ms")?;
        metrics_file = Some(f);
        if cfg.eval_every > 0 && val.is_some() {
            let mut f = BufWriter::new(File::create(dir.join("eval.csv"))?);
            writeln!(f, "step,val_loss")?;
            eval_file = Some(f);
        }
    }
    let started = Instant::now();
    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_finite = None;
    while state.step < cfg.total_steps {
        let mut m = match train_step(&mut state, cfg, &sampler) {
            Ok(m) => m,
            Err(Error::NonFinite { step, lr, grad_norm, .. }) => {
                if let Some(dir) = out {
                    let snap = Divergence {
                        step,
                        lr,
                        grad_norm,
                        last_finite_loss: last_finite,
                        param_norms: state
                            .model
                            .params()
                            .iter()
                            .map(|p| {
                                let n = p.tensor.data().iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt();
                                (p.name.clone(), n)
                            })
                            .collect(),
                    };
                    fs::write(dir.join("divergence.json"), serde_json::to_vec_pretty(&snap)?)?;
                }
                if let Some(f) = metrics_file.as_mut() {
                    f.flush()?;
                }
                return Err(Error::NonFinite {
                    step,
                    lr,
                    grad_norm,
                    last_finite_loss: last_finite,
                });
            }
            Err(e) => return Err(e),
        };
        m.wall_ms = started.elapsed().as_millis() as u64;
        last_finite = Some(m.train_loss);
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{},{:e},{},{}", m.step, m.lr, m.train_loss, m.wall_ms)?;
        }
        if m.step % 50 == 0 {
            log::info!("step {} lr {:.3e} loss {:.4} grad {:.3}", m.step, m.lr, m.train_loss, m.grad_norm);
        }
        metrics.push(m);
        let done = state.step;
        if let (Some(val), true) = (val, cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let e = eval_loss(&state.model, val, seq_len, cfg.eval_windows, cfg.seed)?;
            log::info!("step {done} val loss {:.4}", e.mean);
            if let Some(f) = eval_file.as_mut() {
                writeln!(f, "{done},{}", e.mean)?;
            }
            evals.push((done, e.mean));
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps {
                let path = dir.join(format!("checkpoint-{done}.bin"));
                save_checkpoint(&state.to_checkpoint(cfg), &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }
    if let Some(f) = eval_file.as_mut() {
        f.flush()?;
    }
    if let Some(dir) = out {
        let path = dir.join("final.bin");
        save_checkpoint(&state.to_checkpoint(cfg), &path)?;
        checkpoints.push(path);
    }
    Ok(TrainRun {
        state,
        metrics,
        evals,
        checkpoints,
        fallback: sampler.fallback(),
        wall_ms: started.elapsed().as_millis() as u64,
    })
}
