//! Central-difference gradient checking.
//!
//! Only meaningful where the function is differentiable in a neighbourhood
//! of radius `h` around `x`; kinks (e.g. `|x|` at 0) give arbitrary results.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Max over coordinates of `|analytic - central_difference| / max(1, |analytic|)`.
///
/// `f` records a scalar function of its input var onto a fresh tape.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let analytic = tape.backward(loss)?.get_or_zero(xv);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Central-difference derivative of a scalar function of one scalar.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
