use serde::{Deserialize, Serialize};

use super::Scalar;

/// AdamW hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub t: u64,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![S::ZERO; len],
            v: vec![S::ZERO; len],
            t: 0,
        }
    }
}

impl AdamW {
    /// One update. Weight decay is decoupled: the parameter shrinks by
    /// `lr * weight_decay` before the bias-corrected Adam step is applied.
    /// `decay = false` skips it (gains, biases, embeddings).
    pub fn step<S: Scalar>(
        &self,
        param: &mut [S],
        grad: &[S],
        state: &mut AdamWState<S>,
        lr: f64,
        decay: bool,
    ) {
        assert_eq!(param.len(), grad.len());
        assert_eq!(param.len(), state.m.len());
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::ONE;
        let shrink = S::from_f64(if decay { 1.0 - lr * self.weight_decay } else { 1.0 });
        let step = S::from_f64(lr / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);
        let eps = S::from_f64(self.eps);
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p *= shrink;
            *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
}

/// Free-function form of [`AdamW::step`] with decay always applied.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    state: &mut AdamWState<S>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    AdamW {
        beta1,
        beta2,
        eps,
        weight_decay,
    }
    .step(param, grad, state, lr, true);
}
