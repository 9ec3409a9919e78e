use super::eval::eval_loss_with;
use super::report::{EvalReport, EvalRow, ReportMeta};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::positional::scale_encoding;
use crate::training::TokenStream;
use crate::transformer::Model;

/// Evaluation multiples a sweep may use.
pub const ALLOWED_MULTIPLES: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    /// Label for the `model` column.
    pub model_tag: String,
    pub n_windows: usize,
    pub seed: u64,
    pub metadata: ReportMeta,
}

/// Checks a sweep grid before any evaluation runs.
pub fn validate_grid(multiples: &[usize], scales: &[f64]) -> Result<()> {
    if multiples.is_empty() {
        return Err(Error::config("sweep.multiples", "must not be empty"));
    }
    if let Some(m) = multiples.iter().find(|m| !ALLOWED_MULTIPLES.contains(m)) {
        return Err(Error::config(
            "sweep.multiples",
            format!("{m} is not one of {ALLOWED_MULTIPLES:?}"),
        ));
    }
    if scales.is_empty() {
        return Err(Error::config("sweep.scales", "must not be empty"));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::config("sweep.scales", format!("{s} is not a positive factor")));
    }
    Ok(())
}

/// One row per `(multiple, scale)`, multiples outermost. Scaling swaps the
/// positional values only; weights are never modified. A failing cell is
/// recorded with its error and the sweep continues.
pub fn extrapolation_sweep<S: Scalar>(
    model: &Model<S>,
    stream: &TokenStream,
    multiples: &[usize],
    scales: &[f64],
    opts: &SweepOptions,
) -> Result<EvalReport> {
    validate_grid(multiples, scales)?;
    let seq_len = model.config().seq_len;
    let base = model.config().scheme();
    let mut rows = Vec::with_capacity(multiples.len() * scales.len());
    for &multiple in multiples {
        for &scale in scales {
            let eval_len = multiple * seq_len;
            let mut row = EvalRow {
                model: opts.model_tag.clone(),
                encoding: base.name().to_string(),
                scale,
                multiple,
                eval_len,
                loss_nats: None,
                stderr: None,
                tokens: 0,
                seed: opts.seed,
                diverged: false,
                error: None,
            };
            let scheme = if scale == 1.0 {
                Ok(None)
            } else {
                scale_encoding(&base, scale).map(Some)
            };
            match scheme.and_then(|s| eval_loss_with(model, stream, eval_len, opts.n_windows, opts.seed, s)) {
                Ok(stats) if stats.mean.is_finite() => {
                    row.loss_nats = Some(stats.mean);
                    row.stderr = Some(stats.stderr);
                    row.tokens = stats.tokens;
                }
                Ok(stats) => {
                    row.diverged = true;
                    row.tokens = stats.tokens;
                    row.error = Some("non-finite evaluation loss".into());
                }
                Err(e) => {
                    log::warn!("{} x{scale} at {eval_len}: {e}", opts.model_tag);
                    row.error = Some(e.to_string());
                }
            }
            rows.push(row);
        }
    }
    Ok(EvalReport::new(seq_len, rows, opts.metadata.clone()))
}
