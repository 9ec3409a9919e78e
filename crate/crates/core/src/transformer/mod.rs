//! Decoder-only transformer with causal multi-head attention and per-block
//! positional encoding.

mod config;
mod gradcheck;
mod model;

pub use config::ModelConfig;
pub use gradcheck::{model_grad_check, ParamGradCheck};
pub use model::{Block, BlockTrace, ForwardOptions, ForwardPass, Model, Param};

use crate::error::{Error, Result};
use crate::numerics::{AttnShape, Mask, Scalar, Tensor};

/// Lower-triangular mask: query `i` sees keys `j <= i`.
pub fn causal_mask(seq: usize) -> Mask {
    Mask::causal(seq)
}

/// Scaled dot-product attention on `[seq, heads, head_dim]` tensors.
pub fn attention<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, mask: &Mask) -> Result<Tensor<S>> {
    let (seq, heads, head_dim) = match q.shape() {
        [s, h, d] => (*s, *h, *d),
        other => {
            return Err(Error::Shape {
                op: "attention",
                lhs: other.to_vec(),
                rhs: k.shape().to_vec(),
            })
        }
    };
    if k.shape() != q.shape() || v.shape() != q.shape() || mask.seq() != seq {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let shape = AttnShape {
        batch: 1,
        seq,
        heads,
        head_dim,
    };
    let (out, _) = crate::numerics::attention_kernel(q.data(), k.data(), v.data(), shape, mask, None);
    Tensor::new(q.shape(), out)
}
