//! The five batch commands. Each returns its summary lines and the files it wrote.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use expe_core::error::Error;
use expe_core::evaluation::{
    ablation_suite, compare_report, eval_loss, extrapolation_sweep, AblationOptions, ReportMeta, SweepOptions,
};
use expe_core::positional::{
    quantization_sensitivity, Encoding, EncodingScheme, ExpeParams, ExqpeParams, FloatFormat,
};
use expe_core::training::{
    load_checkpoint, load_documents, split_documents, train, CorpusSplits, TrainState,
};
use expe_core::transformer::Model;
use serde_json::json;

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Train,
    Eval,
    Sweep,
    Ablate,
    Quantcheck,
}

/// Several config violations reported together.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<Error>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Default)]
pub struct Outcome {
    pub summaries: Vec<String>,
    pub artifacts: Vec<PathBuf>,
}

impl Outcome {
    fn say(&mut self, line: impl Into<String>) {
        self.summaries.push(line.into());
    }

    fn write(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(path);
        Ok(())
    }
}

pub fn run(cmd: Command, cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Outcome> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut out = Outcome::default();
    out.write(dir.join("config.json"), serde_json::to_vec_pretty(&cfg.to_value())?)?;
    match cmd {
        Command::Train => train_cmd(cfg, &dir, checkpoint, &mut out)?,
        Command::Eval => eval_cmd(cfg, &dir, checkpoint, &mut out)?,
        Command::Sweep => sweep_cmd(cfg, &dir, checkpoint, &mut out)?,
        Command::Ablate => ablate_cmd(cfg, &dir, &mut out)?,
        Command::Quantcheck => quant_cmd(cfg, &dir, &mut out)?,
    }
    Ok(out)
}

fn load_splits(cfg: &RunConfig, out: &mut Outcome) -> Result<CorpusSplits> {
    let docs = load_documents(&cfg.training.corpus)?;
    let splits = split_documents(&docs);
    out.say(format!(
        "data: {} documents{}, tokens train {} / val {} / test {}",
        docs.len(),
        if splits.split_by_position { " (split by position)" } else { "" },
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    ));
    Ok(splits)
}

fn load_model(dir: &Path, checkpoint: Option<&Path>) -> Result<(Model<f32>, PathBuf)> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join("final.bin"));
    if !path.is_file() {
        bail!("missing checkpoint: {} (train first or pass --checkpoint)", path.display());
    }
    let ckpt = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok((ckpt.model, path))
}

fn train_cmd(cfg: &RunConfig, dir: &Path, checkpoint: Option<&Path>, out: &mut Outcome) -> Result<()> {
    let splits = load_splits(cfg, out)?;
    let seed = cfg.training.seed;
    let state = match checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if ckpt.model.config() != &cfg.model {
                return Err(ConfigErrors(vec![Error::config(
                    "checkpoint",
                    format!("model in {} does not match the configured model", p.display()),
                )])
                .into());
            }
            let state = TrainState::from_checkpoint(ckpt)?;
            out.say(format!("resume: step {} from {}", state.step, p.display()));
            state
        }
        None => TrainState::new(Model::<f32>::new(cfg.model.clone(), seed)?, seed),
    };
    let val = (!splits.val.is_empty()).then_some(&splits.val);
    let run = train(state, &cfg.training, &splits.train, val, Some(dir))?;
    let last = run.metrics.last();
    out.say(format!(
        "train: {} ({} params) step {} in {:.1}s, final train loss {}{}",
        cfg.model.encoding.name(),
        run.state.model.num_params(),
        run.state.step,
        run.wall_ms as f64 / 1000.0,
        last.map(|m| format!("{:.4}", m.train_loss)).unwrap_or_else(|| "n/a".into()),
        run.evals.last().map(|(_, v)| format!(", val loss {v:.4}")).unwrap_or_default(),
    ));
    out.artifacts.push(dir.join("metrics.csv"));
    if !run.evals.is_empty() {
        out.artifacts.push(dir.join("eval.csv"));
    }
    out.artifacts.extend(run.checkpoints);
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, dir: &Path, checkpoint: Option<&Path>, out: &mut Outcome) -> Result<()> {
    let (model, path) = load_model(dir, checkpoint)?;
    let splits = load_splits(cfg, out)?;
    let len = model.config().seq_len;
    let stats = eval_loss(&model, &splits.test, len, cfg.sweep.n_windows, cfg.sweep.seed)?;
    out.say(format!(
        "eval: {} at length {len}: {:.4} ± {:.4} nats over {} tokens",
        model.config().encoding.name(),
        stats.mean,
        stats.stderr,
        stats.tokens
    ));
    let body = json!({
        "checkpoint": path,
        "split": "test",
        "eval_len": len,
        "loss_nats": stats.mean,
        "stderr": stats.stderr,
        "tokens": stats.tokens,
        "windows": stats.windows,
        "seed": cfg.sweep.seed,
    });
    out.write(dir.join("eval.json"), serde_json::to_vec_pretty(&body)?)
}

fn sweep_cmd(cfg: &RunConfig, dir: &Path, checkpoint: Option<&Path>, out: &mut Outcome) -> Result<()> {
    let (model, _) = load_model(dir, checkpoint)?;
    let splits = load_splits(cfg, out)?;
    let opts = SweepOptions {
        model_tag: cfg.run_name.clone(),
        n_windows: cfg.sweep.n_windows,
        seed: cfg.sweep.seed,
        metadata: ReportMeta::collect(&cfg.to_value()),
    };
    let report = extrapolation_sweep(&model, &splits.test, &cfg.sweep.multiples, &cfg.sweep.scales, &opts)?;
    let merged = compare_report(std::slice::from_ref(&report))?;
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    out.say(format!(
        "sweep: {} rows ({} multiples x {} scales), {} failed",
        report.rows.len(),
        cfg.sweep.multiples.len(),
        cfg.sweep.scales.len(),
        failed
    ));
    out.write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    out.write(dir.join("report.csv"), report.to_csv())?;
    out.write(dir.join("report.svg"), merged.svg)
}

fn ablate_cmd(cfg: &RunConfig, dir: &Path, out: &mut Outcome) -> Result<()> {
    if !matches!(cfg.model.encoding, Encoding::Expe(_)) {
        return Err(ConfigErrors(vec![Error::config(
            "encoding.kind",
            format!("ablate needs an expe base model, got {}", cfg.model.encoding.name()),
        )])
        .into());
    }
    let splits = load_splits(cfg, out)?;
    let opts = AblationOptions {
        multiples: cfg.ablate.multiples.clone(),
        n_windows: cfg.ablate.n_windows,
        eval_seed: cfg.sweep.seed,
        out: Some(dir.join("ablation")),
        reuse: cfg.ablate.reuse,
        metadata: ReportMeta::collect(&cfg.to_value()),
    };
    let runs = ablation_suite(&cfg.model, &cfg.training, &splits.train, &splits.test, &opts)?;
    let mut summary = String::from("variant,relative_time,wall_ms,final_train_loss,diverged\n");
    for r in &runs {
        let losses: Vec<String> = r
            .report
            .rows
            .iter()
            .map(|row| {
                let v = row.loss_nats.map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into());
                format!("ev={} {v}", row.multiple)
            })
            .collect();
        out.say(format!(
            "ablate: {} {}, time x{:.2}{}",
            r.variant.tag(),
            losses.join(" "),
            r.relative_time,
            if r.diverged { ", diverged" } else { "" }
        ));
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant.tag(),
            r.relative_time,
            r.wall_ms,
            r.final_train_loss.map(|v| v.to_string()).unwrap_or_default(),
            r.diverged
        ));
    }
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    let merged = compare_report(&reports)?;
    out.write(dir.join("ablation.json"), serde_json::to_vec_pretty(&runs)?)?;
    out.write(dir.join("ablation.csv"), merged.csv)?;
    out.write(dir.join("ablation_time.csv"), summary)?;
    out.write(dir.join("ablation.svg"), merged.svg)
}

fn quant_cmd(cfg: &RunConfig, dir: &Path, out: &mut Outcome) -> Result<()> {
    let q = &cfg.quantcheck;
    let fmt = FloatFormat::parse(&q.format)?;
    let schemes: [EncodingScheme; 2] = [
        Encoding::Expe(ExpeParams {
            start: 0.0,
            theta: q.theta,
            l: q.l,
            scale: 1.0,
        })
        .into(),
        Encoding::Exqpe(ExqpeParams {
            start: 0.0,
            theta1: q.theta,
            theta2: q.theta2,
            l: q.l,
            scale: 1.0,
        })
        .into(),
    ];
    let reports = schemes
        .iter()
        .map(|s| quantization_sensitivity(s, q.l, q.max_len, fmt))
        .collect::<expe_core::error::Result<Vec<_>>>()?;
    let show = |n: Option<usize>| n.map(|v| v.to_string()).unwrap_or_else(|| "none".into());
    out.say(format!(
        "quantcheck: {} (e{}m{}), l={}, {} positions: expe first collision {} ({} total), exqpe first collision {} ({} total)",
        q.format,
        fmt.exp_bits,
        fmt.man_bits,
        q.l,
        q.max_len,
        show(reports[0].first_collision),
        reports[0].collision_count,
        show(reports[1].first_collision),
        reports[1].collision_count
    ));
    let body = json!({
        "format": q.format,
        "theta": q.theta,
        "theta2": q.theta2,
        "l": q.l,
        "max_len": q.max_len,
        "reports": reports,
    });
    out.write(dir.join("quantcheck.json"), serde_json::to_vec_pretty(&body)?)
}
