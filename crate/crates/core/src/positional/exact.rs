use super::{ExpeParams, ExqpeParams, LearnedMode};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_init, LabRng, Scalar, Tensor};

/// `(p_n, …, p_{n+l-1})` with `p_j = scale·(S + θ·j)`; with `stable_p` every
/// slot holds `p_n`.
pub fn expe_position_vector(n: usize, p: &ExpeParams, stable_p: bool) -> Vec<f64> {
    (0..p.l)
        .map(|j| {
            let pos = if stable_p { n } else { n + j };
            p.scale * (p.start + p.theta * pos as f64)
        })
        .collect()
}

/// Closed form of the ExQPE vector at position `n`:
/// slot `j = scale·(S + j·θ1 + θ2·|{i ∈ [0, n] : i ≡ j (mod l)}|)`.
pub fn exqpe_position_vector(n: usize, p: &ExqpeParams) -> Vec<f64> {
    (0..p.l)
        .map(|j| {
            let hits = if j <= n { (n - j) / p.l + 1 } else { 0 };
            p.scale * (p.start + j as f64 * p.theta1 + p.theta2 * hits as f64)
        })
        .collect()
}

/// The ExQPE vector by literal unrolling: start from the ramp with slot 0
/// already bumped, then bump slot `i mod l` for every `i in 1..=n`.
pub fn exqpe_recurrence(n: usize, p: &ExqpeParams) -> Vec<f64> {
    let mut v: Vec<f64> = (0..p.l).map(|j| p.start + j as f64 * p.theta1).collect();
    v[0] += p.theta2;
    for i in 1..=n {
        v[i % p.l] += p.theta2;
    }
    v.iter().map(|x| p.scale * x).collect()
}

/// `[seq, l]` table of ExPE rows for positions `offset..offset+seq`.
pub fn expe_table<S: Scalar>(seq: usize, offset: usize, p: &ExpeParams, stable_p: bool) -> Vec<S> {
    (offset..offset + seq)
        .flat_map(|n| expe_position_vector(n, p, stable_p))
        .map(S::from_f64)
        .collect()
}

pub fn exqpe_table<S: Scalar>(seq: usize, offset: usize, p: &ExqpeParams) -> Vec<S> {
    (offset..offset + seq)
        .flat_map(|n| exqpe_position_vector(n, p))
        .map(S::from_f64)
        .collect()
}

fn override_rows<S: Scalar>(
    x: &Tensor<S>,
    l: usize,
    mut row_fn: impl FnMut(usize) -> Vec<f64>,
) -> Result<Tensor<S>> {
    let d = x.last_dim();
    if l == 0 || l > d {
        return Err(Error::config("encoding.l", format!("must be in [1, {d}], got {l}")));
    }
    let mut out = x.clone().with_requires_grad(false);
    out.clear_grad();
    for (n, row) in out.data_mut().chunks_mut(d).enumerate() {
        for (slot, v) in row.iter_mut().zip(row_fn(n)) {
            *slot = S::from_f64(v);
        }
    }
    Ok(out)
}

/// Overrides dims `0..l` of row `n` of `x` (`[seq, d]`) with the ExPE vector
/// for position `offset + n`; dims `l..d` are copied through untouched.
pub fn expe_apply<S: Scalar>(
    x: &Tensor<S>,
    p: &ExpeParams,
    offset: usize,
    stable_p: bool,
) -> Result<Tensor<S>> {
    override_rows(x, p.l, |n| expe_position_vector(offset + n, p, stable_p))
}

pub fn exqpe_apply<S: Scalar>(x: &Tensor<S>, p: &ExqpeParams, offset: usize) -> Result<Tensor<S>> {
    override_rows(x, p.l, |n| exqpe_position_vector(offset + n, p))
}

/// Trainable `(S, θ)` scalars for the learned ExPE ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedExpe<S> {
    pub start: Tensor<S>,
    pub theta: Tensor<S>,
}

/// `LearnedInitialized` starts from the fixed values; `LearnedRandom` draws
/// both scalars from `N(0, std)`.
pub fn learned_scalar_params<S: Scalar>(
    mode: LearnedMode,
    p: &ExpeParams,
    std: f64,
    rng: &mut LabRng,
) -> Option<LearnedExpe<S>> {
    let (start, theta) = match mode {
        LearnedMode::Off => return None,
        LearnedMode::LearnedInitialized => (
            Tensor::scalar(S::from_f64(p.start)),
            Tensor::scalar(S::from_f64(p.theta)),
        ),
        LearnedMode::LearnedRandom => (gaussian_init(&[1], std, rng), gaussian_init(&[1], std, rng)),
    };
    Some(LearnedExpe {
        start: start.with_requires_grad(true),
        theta: theta.with_requires_grad(true),
    })
}
