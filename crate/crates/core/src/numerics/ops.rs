//! Forward kernels shared by the pure tensor API and the autodiff tape.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Strided 2-D view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    pub fn with_stride(mut self, rs: usize) -> Self {
        self.rs = rs;
        self
    }

    pub fn t(self) -> Self {
        Self {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn end(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
    }
}

/// `c = alpha * a * b + beta * c` over strided views.
pub(crate) fn gemm_view<S: Scalar>(
    alpha: S,
    a: &[S],
    av: View,
    b: &[S],
    bv: View,
    beta: S,
    c: &mut [S],
    cv: View,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dims");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    assert!(av.end() <= a.len() && bv.end() <= b.len() && cv.end() <= c.len());
    // SAFETY: every view is bounds-checked above; `c` is exclusively borrowed
    // and cannot alias `a` or `b`.
    unsafe {
        S::gemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// Row-major product `(m×k)·(k×n)`, optionally accumulating into `c`.
pub(crate) fn matmul_into<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    c: &mut [S],
    accumulate: bool,
) {
    let beta = if accumulate { S::ONE } else { S::ZERO };
    gemm_view(
        S::ONE,
        a,
        View::row_major(m, k),
        b,
        View::row_major(k, n),
        beta,
        c,
        View::row_major(m, n),
    );
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![S::ZERO; m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut out, false);
    Tensor::new([m, n], out)
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }),
    }
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row
        .iter()
        .copied()
        .fold(S::from_f64(f64::NEG_INFINITY), S::max);
    let mut sum = S::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::ONE / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone().with_requires_grad(false);
    out.clear_grad();
    let w = x.last_dim();
    out.data_mut()
        .chunks_mut(w)
        .for_each(|row| softmax_in_place(row));
    out
}

/// Writes `gain * x / rms(x[skip..])` for each row and returns the per-row
/// `1/rms`. The leading `skip` dims are scaled but do not enter the statistic.
pub(crate) fn rms_norm_into<S: Scalar>(
    x: &[S],
    gain: &[S],
    eps: S,
    skip: usize,
    out: &mut [S],
) -> Vec<S> {
    let d = gain.len();
    let inv_d = S::ONE / S::from_f64((d - skip) as f64);
    x.chunks(d)
        .zip(out.chunks_mut(d))
        .map(|(xr, yr)| {
            let ms = xr[skip..].iter().map(|&v| v * v).sum::<S>() * inv_d;
            let inv = S::ONE / (ms + eps).sqrt();
            for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
                *y = g * v * inv;
            }
            inv
        })
        .collect()
}

pub fn rms_norm<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    if gain.shape().len() != 1 || gain.len() != x.last_dim() {
        return Err(Error::Shape {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut out = vec![S::ZERO; x.len()];
    rms_norm_into(x.data(), gain.data(), eps, 0, &mut out);
    Tensor::new(x.shape(), out)
}

/// Mean negative log-likelihood over rows; also returns the softmax rows.
pub(crate) fn cross_entropy_forward<S: Scalar>(
    logits: &[S],
    vocab: usize,
    targets: &[usize],
) -> Result<(S, Vec<S>)> {
    let rows = logits.len() / vocab;
    if targets.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: vec![rows, vocab],
            rhs: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index {
            index: bad,
            size: vocab,
            context: "cross_entropy target",
        });
    }
    let mut probs = logits.to_vec();
    let mut total = 0.0f64;
    for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
        let max = row
            .iter()
            .copied()
            .fold(S::from_f64(f64::NEG_INFINITY), S::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
        total += (lse - row[t]).to_f64();
        softmax_in_place(row);
    }
    Ok((S::from_f64(total / rows as f64), probs))
}

/// Mean cross-entropy in nats; `targets` has one id per last-axis row.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<S> {
    cross_entropy_forward(logits.data(), logits.last_dim(), targets).map(|(l, _)| l)
}

/// Rotates each consecutive pair `(x[2i], x[2i+1])` of every head by the
/// angle whose cosine/sine sit at `[t, i]` of the `[seq, head_dim/2]` tables,
/// where `t` is the row's position. `inverse` rotates by the negated angle.
pub(crate) fn rotate_pairs<S: Scalar>(
    data: &mut [S],
    cos: &[S],
    sin: &[S],
    seq: usize,
    row_len: usize,
    head_dim: usize,
    inverse: bool,
) {
    let half = head_dim / 2;
    for (r, row) in data.chunks_mut(row_len).enumerate() {
        let t = r % seq;
        let c = &cos[t * half..(t + 1) * half];
        let s = &sin[t * half..(t + 1) * half];
        for head in row.chunks_mut(head_dim) {
            for (i, pair) in head.chunks_mut(2).enumerate() {
                let (a, b) = (pair[0], pair[1]);
                let sn = if inverse { -s[i] } else { s[i] };
                pair[0] = a * c[i] - b * sn;
                pair[1] = a * sn + b * c[i];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(GELU_K);
    let half = S::from_f64(0.5);
    half * x * (S::ONE + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(GELU_K);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (S::ONE + t) + half * x * (S::ONE - t * t) * c * (S::ONE + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &a).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Tensor::<f64>::from_f64([1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::from_f64([2, 1], &[3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = matmul(
            &Tensor::new([3, 4], a.clone()).unwrap(),
            &Tensor::new([4, 2], b.clone()).unwrap(),
        )
        .unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b, 3, 4, 2)) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros([2, 3]);
        let b = Tensor::<f64>::zeros([2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::<f64>::from_f64([2], &[0.0, 0.0]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::<f64>::from_f64([2], &[1000.0, 1000.0]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::<f64>::from_f64([2], &[0.0, 3f64.ln()]).unwrap());
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rms_norm_examples() {
        let x = Tensor::<f64>::from_f64([2], &[3.0, 4.0]).unwrap();
        let ones = Tensor::full([2], 1.0);
        let y = rms_norm(&x, &ones, 0.0).unwrap();
        // rms = sqrt(12.5)
        assert!((y.data()[0] - 3.0 / 12.5f64.sqrt()).abs() < 1e-15);
        assert!((y.data()[0] - 0.84853).abs() < 1e-5);
        assert!((y.data()[1] - 1.13137).abs() < 1e-5);

        let c = Tensor::<f64>::full([5], -2.5);
        let y = rms_norm(&c, &Tensor::full([5], 1.0), 0.0).unwrap();
        assert!(y.data().iter().all(|&v| (v + 1.0).abs() < 1e-15));

        let y = rms_norm(&x, &Tensor::zeros([2]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 32000;
        let uniform = Tensor::<f64>::zeros([1, 1, v]);
        let l = cross_entropy(&uniform, &[17]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        assert!((l - 10.3735).abs() < 1e-4);

        let mut confident = Tensor::<f64>::zeros([1, 4]);
        confident.data_mut()[2] = 100.0;
        assert!(cross_entropy(&confident, &[2]).unwrap() < 1e-40);

        assert!(matches!(
            cross_entropy(&confident, &[4]),
            Err(Error::Index { index: 4, .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits: Vec<f64> = (0..30).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets = [0usize, 4, 2, 1, 3, 3];
        let t = Tensor::new([2, 3, 5], logits.clone()).unwrap();
        let got = cross_entropy(&t, &targets).unwrap();
        let mut expect = 0.0;
        for (p, &tgt) in targets.iter().enumerate() {
            let row = &logits[p * 5..p * 5 + 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[tgt].exp() / z).ln();
        }
        expect /= 6.0;
        assert!((got - expect).abs() < 1e-13);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
