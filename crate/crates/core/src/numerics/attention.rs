//! Scaled dot-product attention kernels over `[batch·seq, heads·head_dim]` buffers.

use super::ops::{gemm_view, softmax_in_place, View};
use super::Scalar;

/// Boolean attention mask; `allows(i, j)` means query `i` may read key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    seq: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn causal(seq: usize) -> Self {
        assert!(seq >= 1, "mask needs at least one position");
        let allowed = (0..seq * seq).map(|p| p % seq <= p / seq).collect();
        Self { seq, allowed }
    }

    pub fn full(seq: usize) -> Self {
        Self {
            seq,
            allowed: vec![true; seq * seq],
        }
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.seq + j]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn numel(&self) -> usize {
        self.batch * self.seq * self.model_dim()
    }

    fn head_view(&self, b: usize, h: usize) -> View {
        let d = self.model_dim();
        View::row_major(self.seq, self.head_dim)
            .with_stride(d)
            .at(b * self.seq * d + h * self.head_dim)
    }

    fn probs_view(&self, b: usize, h: usize) -> View {
        let t = self.seq;
        View::row_major(t, t).at((b * self.heads + h) * t * t)
    }
}

/// Returns `(output, probs)`; probs is `[batch, heads, seq, seq]` and is
/// recorded before `keep` (an inverted-dropout multiplier per weight) applies.
pub(crate) fn attention_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    shape: AttnShape,
    mask: &Mask,
    keep: Option<&[S]>,
) -> (Vec<S>, Vec<S>) {
    let t = shape.seq;
    assert_eq!(mask.seq(), t, "mask length");
    let scale = S::from_f64(1.0 / (shape.head_dim as f64).sqrt());
    let mut probs = vec![S::ZERO; shape.batch * shape.heads * t * t];
    let mut out = vec![S::ZERO; shape.numel()];
    let neg_inf = S::from_f64(f64::NEG_INFINITY);
    let mut dropped = vec![S::ZERO; if keep.is_some() { t * t } else { 0 }];
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let hv = shape.head_view(b, h);
            let pv = shape.probs_view(b, h);
            gemm_view(scale, q, hv, k, hv.t(), S::ZERO, &mut probs, pv);
            let block = &mut probs[pv.offset..pv.offset + t * t];
            for (i, row) in block.chunks_mut(t).enumerate() {
                let mut any = false;
                for (j, s) in row.iter_mut().enumerate() {
                    if mask.allows(i, j) {
                        any = true;
                    } else {
                        *s = neg_inf;
                    }
                }
                if any {
                    softmax_in_place(row);
                } else {
                    row.iter_mut().for_each(|s| *s = S::ZERO);
                }
            }
            match keep {
                Some(keep) => {
                    let span = pv.offset..pv.offset + t * t;
                    for ((d, &p), &m) in dropped.iter_mut().zip(&probs[span.clone()]).zip(&keep[span]) {
                        *d = p * m;
                    }
                    gemm_view(S::ONE, &dropped, View::row_major(t, t), v, hv, S::ZERO, &mut out, hv);
                }
                None => gemm_view(S::ONE, &probs, pv, v, hv, S::ZERO, &mut out, hv),
            }
        }
    }
    (out, probs)
}

/// Accumulates input gradients for `attention_forward` given `d_out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    keep: Option<&[S]>,
    d_out: &[S],
    shape: AttnShape,
    dq: Option<&mut Vec<S>>,
    dk: Option<&mut Vec<S>>,
    dv: Option<&mut Vec<S>>,
) {
    let t = shape.seq;
    let scale = S::from_f64(1.0 / (shape.head_dim as f64).sqrt());
    let mut dq = dq;
    let mut dk = dk;
    let mut dv = dv;
    let mut dp = vec![S::ZERO; t * t];
    let local = View::row_major(t, t);
    let mut dropped = vec![S::ZERO; if keep.is_some() { t * t } else { 0 }];
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let hv = shape.head_view(b, h);
            let pv = shape.probs_view(b, h);
            let span = pv.offset..pv.offset + t * t;
            if let Some(dv) = dv.as_deref_mut() {
                match keep {
                    Some(keep) => {
                        for ((d, &p), &m) in dropped.iter_mut().zip(&probs[span.clone()]).zip(&keep[span.clone()]) {
                            *d = p * m;
                        }
                        gemm_view(S::ONE, &dropped, local.t(), d_out, hv, S::ONE, dv, hv);
                    }
                    None => gemm_view(S::ONE, probs, pv.t(), d_out, hv, S::ONE, dv, hv),
                }
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            gemm_view(S::ONE, d_out, hv, v, hv.t(), S::ZERO, &mut dp, local);
            if let Some(keep) = keep {
                dp.iter_mut().zip(&keep[span.clone()]).for_each(|(g, &m)| *g *= m);
            }
            let p = &probs[span];
            for (dp_row, p_row) in dp.chunks_mut(t).zip(p.chunks(t)) {
                let dot: S = dp_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
                for (g, &pr) in dp_row.iter_mut().zip(p_row) {
                    *g = pr * (*g - dot);
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                gemm_view(scale, &dp, local, k, hv, S::ONE, dq, hv);
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm_view(scale, &dp, local.t(), q, hv, S::ONE, dk, hv);
            }
        }
    }
}
