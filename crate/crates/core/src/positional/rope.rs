use super::RopeParams;
use crate::error::{Error, Result};
use crate::numerics::ops::rotate_pairs;
use crate::numerics::{Scalar, Tensor};

/// `[seq, head_dim/2]` cosine and sine tables; pair `t` at position `m`
/// rotates by `m · base^(-2t/head_dim)`.
pub fn rope_tables<S: Scalar>(
    seq: usize,
    offset: usize,
    head_dim: usize,
    p: &RopeParams,
) -> (Vec<S>, Vec<S>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for m in offset..offset + seq {
        for t in 0..half {
            let freq = p.theta_base.powf(-2.0 * t as f64 / head_dim as f64);
            let angle = m as f64 * freq;
            cos.push(S::from_f64(angle.cos()));
            sin.push(S::from_f64(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates `x` (`[seq, heads, head_dim]`) in place of position `offset + n`.
pub fn rope_apply<S: Scalar>(x: &Tensor<S>, p: &RopeParams, offset: usize) -> Result<Tensor<S>> {
    let (seq, heads, head_dim) = match x.shape() {
        [s, h, d] => (*s, *h, *d),
        other => {
            return Err(Error::Shape {
                op: "rope_apply",
                lhs: other.to_vec(),
                rhs: vec![0, 0, 0],
            })
        }
    };
    if head_dim % 2 != 0 {
        return Err(Error::config("head_size", format!("rope needs even head_dim, got {head_dim}")));
    }
    let (cos, sin) = rope_tables::<S>(seq, offset, head_dim, p);
    let mut out = x.clone().with_requires_grad(false);
    out.clear_grad();
    rotate_pairs(out.data_mut(), &cos, &sin, seq, heads * head_dim, head_dim, false);
    Ok(out)
}
