use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::positional::EncodingScheme;
use crate::training::{TokenStream, WindowSampler};
use crate::transformer::{ForwardOptions, Model};

/// Mean next-token loss over sampled windows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    /// Mean cross-entropy in nats over every scored position.
    pub mean: f64,
    /// Standard error of the per-window means.
    pub stderr: f64,
    pub tokens: usize,
    pub windows: usize,
}

/// Window starts used by [`eval_loss`] for `(stream, eval_length, n_windows, seed)`.
pub fn eval_windows(stream: &TokenStream, eval_length: usize, n_windows: usize, seed: u64) -> Result<Vec<usize>> {
    let sampler = WindowSampler::new(stream, eval_length, eval_length + 1)?;
    if n_windows == 0 || sampler.num_starts() < n_windows {
        return Err(Error::InsufficientData {
            required: eval_length + n_windows.max(1),
            available: stream.len(),
        });
    }
    Ok((0..n_windows as u64).map(|w| sampler.draw(seed, u64::MAX, w)).collect())
}

/// Mean next-token cross-entropy over `n_windows` windows of `eval_length`
/// tokens, taken from single documents whenever one is long enough.
/// Dropout is off; the result depends only on the arguments.
pub fn eval_loss<S: Scalar>(
    model: &Model<S>,
    stream: &TokenStream,
    eval_length: usize,
    n_windows: usize,
    seed: u64,
) -> Result<EvalStats> {
    eval_loss_with(model, stream, eval_length, n_windows, seed, None)
}

/// [`eval_loss`] with the positional scheme replaced by `scheme`.
pub fn eval_loss_with<S: Scalar>(
    model: &Model<S>,
    stream: &TokenStream,
    eval_length: usize,
    n_windows: usize,
    seed: u64,
    scheme: Option<EncodingScheme>,
) -> Result<EvalStats> {
    let starts = eval_windows(stream, eval_length, n_windows, seed)?;
    let opts = ForwardOptions {
        encoding: scheme,
        ..Default::default()
    };
    let toks = stream.tokens();
    let mut per_window = Vec::with_capacity(starts.len());
    for s in starts {
        let inputs: Vec<usize> = toks[s..s + eval_length].iter().map(|&t| t as usize).collect();
        let targets: Vec<usize> = toks[s + 1..s + eval_length + 1].iter().map(|&t| t as usize).collect();
        per_window.push(model.loss(&inputs, &targets, 1, &opts)?.to_f64());
    }
    let n = per_window.len() as f64;
    let mean = per_window.iter().sum::<f64>() / n;
    let var = if per_window.len() > 1 {
        per_window.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(EvalStats {
        mean,
        stderr: (var / n).sqrt(),
        tokens: per_window.len() * eval_length,
        windows: per_window.len(),
    })
}
