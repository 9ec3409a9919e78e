use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Rows `offset..offset+seq` of the sinusoidal table, flattened `[seq, d]`.
pub fn sinusoidal_rows<S: Scalar>(offset: usize, seq: usize, d: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(seq * d);
    for i in offset..offset + seq {
        for t in 0..d / 2 {
            let angle = i as f64 / 10_000f64.powf(2.0 * t as f64 / d as f64);
            out.push(S::from_f64(angle.sin()));
            out.push(S::from_f64(angle.cos()));
        }
    }
    out
}

/// Row `i`: `(sin(i/10000^{2t/d}), cos(i/10000^{2t/d}))` interleaved over `t`.
pub fn sinusoidal_table<S: Scalar>(max_len: usize, d: usize) -> Result<Tensor<S>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::config("d_model", format!("sinusoidal table needs even d, got {d}")));
    }
    Tensor::new([max_len, d], sinusoidal_rows(0, max_len, d))
}

/// `x[n] + table[offset + n]` for each row of `x` (`[seq, d]`).
pub fn additive_apply<S: Scalar>(x: &Tensor<S>, table: &Tensor<S>, offset: usize) -> Result<Tensor<S>> {
    let d = x.last_dim();
    if table.last_dim() != d {
        return Err(Error::Shape {
            op: "additive_apply",
            lhs: x.shape().to_vec(),
            rhs: table.shape().to_vec(),
        });
    }
    let seq = x.rows();
    if offset + seq > table.rows() {
        return Err(Error::LengthExceeded {
            required: offset + seq,
            available: table.rows(),
        });
    }
    let mut out = x.clone().with_requires_grad(false);
    out.clear_grad();
    for (n, row) in out.data_mut().chunks_mut(d).enumerate() {
        row.iter_mut()
            .zip(table.row(offset + n))
            .for_each(|(a, &b)| *a += b);
    }
    Ok(out)
}
