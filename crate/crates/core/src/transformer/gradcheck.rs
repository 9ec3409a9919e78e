use super::Model;
use crate::error::Result;

/// Worst mismatch between analytic and central-difference gradients for one
/// parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

/// Checks every entry of every parameter of `model` against central
/// differences of the mean cross-entropy on `(tokens, targets)`.
///
/// The error of one entry is `|a - fd| / max(|a|, |fd|, floor)`.
pub fn model_grad_check(
    model: &Model<f64>,
    tokens: &[usize],
    targets: &[usize],
    batch: usize,
    h: f64,
    floor: f64,
) -> Result<Vec<ParamGradCheck>> {
    let mut work = model.clone();
    work.zero_grads();
    work.loss_and_grads(tokens, targets, batch, 1.0, None)?;
    let analytic: Vec<Vec<f64>> = work
        .params()
        .iter()
        .map(|p| p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    let opts = Default::default();
    let mut out = Vec::with_capacity(analytic.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        let n = work.params()[pi].tensor.len();
        for j in 0..n {
            let orig = work.params()[pi].tensor.data()[j];
            work.params_mut()[pi].tensor.data_mut()[j] = orig + h;
            let up = work.loss(tokens, targets, batch, &opts)?;
            work.params_mut()[pi].tensor.data_mut()[j] = orig - h;
            let down = work.loss(tokens, targets, batch, &opts)?;
            work.params_mut()[pi].tensor.data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad.get(j).copied().unwrap_or(0.0);
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            worst = worst.max(err);
        }
        out.push(ParamGradCheck {
            name: work.params()[pi].name.clone(),
            entries: n,
            max_rel_err: worst,
        });
    }
    Ok(out)
}
