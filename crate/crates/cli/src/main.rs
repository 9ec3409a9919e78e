use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use expe_cli::{config, run, Command, ConfigErrors};
use serde_json::{json, Value};

/// Train, evaluate and analyse small transformers under different positional encodings.
#[derive(Debug, Parser)]
#[command(name = "expe", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (default: $EXPE_OUT_DIR or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-key override, e.g. `training.seed=7`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set training.seed=<u64>`.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to evaluate, sweep or resume from (default: <run>/final.bin).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Shorthand for `--set run_name=<name>`.
    #[arg(long)]
    run_name: Option<String>,
    /// Evaluation multiples, e.g. `1,2,4` (sweep and ablate).
    #[arg(long, value_delimiter = ',')]
    multiples: Vec<usize>,
    /// Encoding scale factors, e.g. `1,0.5` (sweep).
    #[arg(long, value_delimiter = ',')]
    scales: Vec<f64>,
    /// Float format for quantcheck, e.g. `bf16-sim`, `fp16`, `e5m2`.
    #[arg(long)]
    format: Option<String>,
    /// Number of positions quantcheck scans.
    #[arg(long)]
    max_len: Option<usize>,
}

impl Cli {
    /// Every flag as a dotted override, in application order.
    fn overrides(&self) -> Result<Vec<(String, Value)>, ConfigErrors> {
        let mut out = Vec::new();
        for s in &self.set {
            out.push(config::parse_override(s).map_err(|e| ConfigErrors(vec![e]))?);
        }
        if let Some(seed) = self.seed {
            out.push(("training.seed".into(), json!(seed)));
        }
        if let Some(o) = &self.out {
            out.push(("out_dir".into(), json!(o)));
        }
        if let Some(n) = &self.run_name {
            out.push(("run_name".into(), json!(n)));
        }
        if !self.multiples.is_empty() {
            let section = if self.command == Command::Ablate { "ablate" } else { "sweep" };
            out.push((format!("{section}.multiples"), json!(self.multiples)));
        }
        if !self.scales.is_empty() {
            out.push(("sweep.scales".into(), json!(self.scales)));
        }
        if let Some(f) = &self.format {
            out.push(("quantcheck.format".into(), json!(f)));
        }
        if let Some(n) = self.max_len {
            out.push(("quantcheck.max_len".into(), json!(n)));
        }
        Ok(out)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let cfg = cli
        .overrides()
        .and_then(|o| config::load_config(cli.config.as_deref(), &o).map_err(ConfigErrors));
    let cfg = match cfg {
        Ok(c) => c,
        Err(errs) => {
            for e in &errs.0 {
                eprintln!("error: {e}");
            }
            return ExitCode::from(2);
        }
    };
    match run(cli.command, &cfg, cli.checkpoint.as_deref()) {
        Ok(outcome) => {
            for line in &outcome.summaries {
                println!("{line}");
            }
            for path in &outcome.artifacts {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let is_config = e.downcast_ref::<ConfigErrors>().is_some()
                || matches!(e.downcast_ref::<expe_core::error::Error>(), Some(expe_core::error::Error::Config { .. }));
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config { 2 } else { 1 })
        }
    }
}
