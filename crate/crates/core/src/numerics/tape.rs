//! Reverse-mode automatic differentiation over a linear tape of coarse ops.
//!
//! Every op appends one node whose inputs were recorded earlier, so the tape
//! is always in topological order and `backward` is a single reverse sweep.

use rand::Rng;

use super::attention::{attention_backward, attention_forward, AttnShape, Mask};
use super::ops::{
    cross_entropy_forward, gelu, gelu_grad, gemm_view, matmul_dims, matmul_into, rms_norm_into,
    rotate_pairs, View,
};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    /// `x · w (+ bias)`; with `transposed`, `w` is stored `[out, in]`.
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
        transposed: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<S>,
        skip: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<S>,
        keep: Option<Vec<S>>,
    },
    OverridePrefix {
        x: Var,
        table: Var,
        seq: usize,
        width: usize,
    },
    Ramp {
        start: Var,
        step: Var,
        positions: Vec<S>,
        scale: S,
    },
    AddRows {
        x: Var,
        table: Var,
        seq: usize,
        offset: usize,
    },
    Rope {
        x: Var,
        cos: Vec<S>,
        sin: Vec<S>,
        seq: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracks: bool,
}

/// Recorded computation; one tape per forward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    sizes: Vec<usize>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, zero-filled when `v` was not reachable from the loss.
    pub fn get_or_zero(&self, v: Var) -> Vec<S> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![S::ZERO; self.sizes[v.0]])
    }

    pub fn take(&mut self, v: Var) -> Vec<S> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![S::ZERO; self.sizes[v.0]])
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, tracks: bool) -> Var {
        self.nodes.push(Node { value, op, tracks });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracks)
    }

    /// Records an input; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let tracks = t.requires_grad();
        self.push(t, Op::Leaf, tracks)
    }

    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![S::ZERO; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out, false);
        let tracks = self.tracks(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b }, tracks))
    }

    /// Affine map over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        self.linear_impl(x, w, bias, false)
    }

    /// Like [`linear`](Self::linear) with `w` stored `[out, in]` (tied output heads).
    pub fn linear_t(&mut self, x: Var, w: Var) -> Result<Var> {
        self.linear_impl(x, w, None, true)
    }

    fn linear_impl(&mut self, x: Var, w: Var, bias: Option<Var>, transposed: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = *xs.last().unwrap();
        let (w_in, d_out) = match ws.as_slice() {
            [a, b] if transposed => (*b, *a),
            [a, b] => (*a, *b),
            _ => return Err(shape_err("linear", &xs, &ws)),
        };
        if w_in != d_in {
            return Err(shape_err("linear", &xs, &ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return Err(shape_err("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / d_in;
        let wv = View::row_major(d_in, d_out);
        let wv = if transposed { View::row_major(d_out, d_in).t() } else { wv };
        let mut out = vec![S::ZERO; rows * d_out];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            out.chunks_mut(d_out).for_each(|r| r.copy_from_slice(bd));
        }
        let beta = if bias.is_some() { S::ONE } else { S::ZERO };
        gemm_view(
            S::ONE,
            self.value(x).data(),
            View::row_major(rows, d_in),
            self.value(w).data(),
            wv,
            beta,
            &mut out,
            View::row_major(rows, d_out),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let tracks = self.tracks(&inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x,
                w,
                bias,
                transposed,
            },
            tracks,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracks = self.tracks(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), tracks))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracks = self.tracks(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), tracks))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let tracks = self.tracks(&[a]);
        self.push(out, Op::Scale(a, factor), tracks)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        let tracks = self.tracks(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracks)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let tracks = self.tracks(&[a]);
        self.push(out, Op::Gelu(a), tracks)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = super::ops::softmax_rows(self.value(a));
        let tracks = self.tracks(&[a]);
        self.push(out, Op::Softmax(a), tracks)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: S) -> Result<Var> {
        self.rms_norm_skip(x, gain, eps, 0)
    }

    /// RMSNorm whose statistic ignores the leading `skip` dims of each row;
    /// those dims are still scaled by it.
    pub fn rms_norm_skip(&mut self, x: Var, gain: Var, eps: S, skip: usize) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || skip >= d {
            return Err(shape_err("rms_norm", self.shape(x), self.shape(gain)));
        }
        let mut out = vec![S::ZERO; self.value(x).len()];
        let inv_rms = rms_norm_into(self.value(x).data(), self.value(gain).data(), eps, skip, &mut out);
        let shape = self.shape(x).to_vec();
        let tracks = self.tracks(&[x, gain]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::RmsNorm {
                x,
                gain,
                inv_rms,
                skip,
            },
            tracks,
        ))
    }

    /// Mean next-token loss in nats; one target per last-axis row of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vocab = *self.shape(logits).last().unwrap();
        let (loss, probs) = cross_entropy_forward(self.value(logits).data(), vocab, targets)?;
        let tracks = self.tracks(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            tracks,
        ))
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = match self.shape(table) {
            [v, d] => (*v, *d),
            s => return Err(shape_err("embedding", s, &[ids.len()])),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                index: bad,
                size: vocab,
                context: "embedding id",
            });
        }
        let tab = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tab[i * d..(i + 1) * d]);
        }
        let tracks = self.tracks(&[table]);
        Ok(self.push(
            Tensor::new([ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            tracks,
        ))
    }

    /// Multi-head scaled dot-product attention; `q`, `k`, `v` are laid out
    /// `[batch·seq, heads·head_dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape, mask: &Mask) -> Result<Var> {
        self.attention_inner(q, k, v, shape, mask, None)
    }

    /// [`attention`](Self::attention) with inverted dropout of rate `p` on the
    /// attention weights.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_dropout<R: Rng>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        mask: &Mask,
        p: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let keep = (p > 0.0).then(|| {
            let scale = S::from_f64(1.0 / (1.0 - p));
            (0..shape.batch * shape.heads * shape.seq * shape.seq)
                .map(|_| if rng.gen::<f64>() < p { S::ZERO } else { scale })
                .collect::<Vec<S>>()
        });
        self.attention_inner(q, k, v, shape, mask, keep)
    }

    fn attention_inner(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        mask: &Mask,
        keep: Option<Vec<S>>,
    ) -> Result<Var> {
        for x in [q, k, v] {
            if self.value(x).len() != shape.numel() {
                return Err(shape_err(
                    "attention",
                    self.shape(x),
                    &[shape.batch * shape.seq, shape.model_dim()],
                ));
            }
        }
        if mask.seq() != shape.seq {
            return Err(shape_err("attention mask", &[mask.seq()], &[shape.seq]));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
            mask,
            keep.as_deref(),
        );
        let out_shape = self.shape(q).to_vec();
        let tracks = self.tracks(&[q, k, v]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
                keep,
            },
            tracks,
        ))
    }

    /// Attention weights recorded by an attention node, `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Replaces the leading `table` columns of every row of `x` with the row of
    /// `table` (`[seq, width]`) for that row's position; `x` is `[batch·seq, d]`.
    pub fn override_prefix(&mut self, x: Var, table: Var, seq: usize) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        let width = match self.shape(table) {
            [s, w] if *s == seq && *w <= d => *w,
            s => return Err(shape_err("override_prefix", self.shape(x), s)),
        };
        if self.value(x).rows() % seq != 0 {
            return Err(shape_err("override_prefix", self.shape(x), &[seq]));
        }
        let mut out = self.value(x).data().to_vec();
        let tab = self.value(table).data();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let t = r % seq;
            row[..width].copy_from_slice(&tab[t * width..(t + 1) * width]);
        }
        let shape = self.shape(x).to_vec();
        let tracks = self.tracks(&[x, table]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::OverridePrefix {
                x,
                table,
                seq,
                width,
            },
            tracks,
        ))
    }

    /// Affine ramp `scale·(start + step·positions[i])` from two scalar vars,
    /// reshaped to `shape`.
    pub fn ramp(
        &mut self,
        start: Var,
        step: Var,
        positions: Vec<S>,
        scale: S,
        shape: &[usize],
    ) -> Result<Var> {
        if !self.value(start).is_scalar() || !self.value(step).is_scalar() {
            return Err(Error::Contract("ramp start/step must be scalars".into()));
        }
        let s0 = self.value(start).item();
        let th = self.value(step).item();
        let out: Vec<S> = positions.iter().map(|&p| scale * (s0 + th * p)).collect();
        let tracks = self.tracks(&[start, step]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Ramp {
                start,
                step,
                positions,
                scale,
            },
            tracks,
        ))
    }

    /// Adds `table[offset + t]` to every row at position `t` of `x` (`[batch·seq, d]`).
    pub fn add_rows(&mut self, x: Var, table: Var, seq: usize, offset: usize) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        let rows = match self.shape(table) {
            [r, w] if *w == d => *r,
            s => return Err(shape_err("add_rows", self.shape(x), s)),
        };
        if offset + seq > rows {
            return Err(Error::LengthExceeded {
                required: offset + seq,
                available: rows,
            });
        }
        if self.value(x).rows() % seq != 0 {
            return Err(shape_err("add_rows", self.shape(x), &[seq]));
        }
        let mut out = self.value(x).data().to_vec();
        let tab = self.value(table).data();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let t = offset + r % seq;
            row.iter_mut()
                .zip(&tab[t * d..(t + 1) * d])
                .for_each(|(a, &b)| *a += b);
        }
        let shape = self.shape(x).to_vec();
        let tracks = self.tracks(&[x, table]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::AddRows {
                x,
                table,
                seq,
                offset,
            },
            tracks,
        ))
    }

    /// Rotates consecutive coordinate pairs of each head; `cos`/`sin` are
    /// `[seq, head_dim/2]` and `x` is `[batch·seq, heads·head_dim]`.
    pub fn rope(&mut self, x: Var, cos: Vec<S>, sin: Vec<S>, seq: usize) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        let half = cos.len() / seq;
        if cos.len() != sin.len() || cos.len() % seq != 0 || half == 0 || d % (2 * half) != 0 {
            return Err(shape_err("rope", self.shape(x), &[seq, half]));
        }
        let mut out = self.value(x).data().to_vec();
        rotate_pairs(&mut out, &cos, &sin, seq, d, 2 * half, false);
        let shape = self.shape(x).to_vec();
        let tracks = self.tracks(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Rope { x, cos, sin, seq }, tracks))
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { S::ZERO } else { keep })
            .collect();
        let out: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let tracks = self.tracks(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), Op::Dropout { x, mask }, tracks)
    }

    /// Back-propagates from the scalar `loss` through every recorded op.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let sizes: Vec<usize> = self.nodes.iter().map(|nd| nd.value.len()).collect();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracks {
            grads[loss.0] = Some(vec![S::ONE]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracks {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, sizes })
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k, n) =
                    matmul_dims(self.shape(*a), self.shape(*b)).expect("checked on record");
                let gv = View::row_major(m, n);
                if let Some(da) = slot(nodes, grads, *a) {
                    gemm_view(S::ONE, g, gv, self.value(*b).data(), View::row_major(k, n).t(), S::ONE, da, View::row_major(m, k));
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    gemm_view(S::ONE, self.value(*a).data(), View::row_major(m, k).t(), g, gv, S::ONE, db, View::row_major(k, n));
                }
            }
            Op::Linear {
                x,
                w,
                bias,
                transposed,
            } => {
                let ws = self.shape(*w);
                let (d_in, d_out) = if *transposed { (ws[1], ws[0]) } else { (ws[0], ws[1]) };
                let rows = g.len() / d_out;
                let gv = View::row_major(rows, d_out);
                let xv = View::row_major(rows, d_in);
                let wv = if *transposed {
                    View::row_major(d_out, d_in).t()
                } else {
                    View::row_major(d_in, d_out)
                };
                if let Some(db) = bias.and_then(|b| slot(nodes, grads, b)) {
                    for r in g.chunks(d_out) {
                        db.iter_mut().zip(r).for_each(|(a, &b)| *a += b);
                    }
                }
                if let Some(dw) = slot(nodes, grads, *w) {
                    // dW (as stored) += x^T g, or g^T x when stored transposed.
                    if *transposed {
                        gemm_view(S::ONE, g, gv.t(), self.value(*x).data(), xv, S::ONE, dw, View::row_major(d_out, d_in));
                    } else {
                        gemm_view(S::ONE, self.value(*x).data(), xv.t(), g, gv, S::ONE, dw, View::row_major(d_in, d_out));
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    gemm_view(S::ONE, g, gv, self.value(*w).data(), wv.t(), S::ONE, dx, xv);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = slot(nodes, grads, *v) {
                        d.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(d) = slot(nodes, grads, *a) {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * o;
                    }
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(av) {
                        *d += g * o;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(d) = slot(nodes, grads, *a) {
                    d.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *f);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = slot(nodes, grads, *a) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(d) = slot(nodes, grads, *a) {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * gelu_grad(x);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                if let Some(d) = slot(nodes, grads, *a) {
                    for ((dr, gr), yr) in d.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::RmsNorm {
                x,
                gain,
                inv_rms,
                skip,
            } => {
                let xv = self.value(*x).data();
                let gn = self.value(*gain).data();
                let d = gn.len();
                let s = *skip;
                let inv_d = S::ONE / S::from_f64((d - s) as f64);
                if let Some(dg) = slot(nodes, grads, *gain) {
                    for ((xr, gr), &r) in xv.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                        for ((dg, &x), &g) in dg.iter_mut().zip(xr).zip(gr) {
                            *dg += g * x * r;
                        }
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (((dxr, xr), gr), &r) in
                        dx.chunks_mut(d).zip(xv.chunks(d)).zip(g.chunks(d)).zip(inv_rms)
                    {
                        let dot: S = gr.iter().zip(gn).zip(xr).map(|((&g, &w), &x)| g * w * x).sum();
                        let c = r * r * r * dot * inv_d;
                        for (i, (((dx, &x), &g), &w)) in dxr.iter_mut().zip(xr).zip(gr).zip(gn).enumerate() {
                            *dx += r * w * g;
                            if i >= s {
                                *dx -= c * x;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(d) = slot(nodes, grads, *logits) {
                    let rows = targets.len();
                    let vocab = probs.len() / rows;
                    let c = g[0] / S::from_f64(rows as f64);
                    for ((dr, pr), &t) in d.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                        for (d, &p) in dr.iter_mut().zip(pr) {
                            *d += c * p;
                        }
                        dr[t] -= c;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(d) = slot(nodes, grads, *table) {
                    let w = self.shape(*table)[1];
                    for (&i, gr) in ids.iter().zip(g.chunks(w)) {
                        d[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
                keep,
            } => {
                // q, k and v may be the same var; route each through a scratch
                // buffer so the three accumulations never alias.
                let want = |x: &Var| nodes[x.0].tracks;
                let mut dq = want(q).then(|| vec![S::ZERO; shape.numel()]);
                let mut dk = want(k).then(|| vec![S::ZERO; shape.numel()]);
                let mut dv = want(v).then(|| vec![S::ZERO; shape.numel()]);
                attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    keep.as_deref(),
                    g,
                    *shape,
                    dq.as_mut(),
                    dk.as_mut(),
                    dv.as_mut(),
                );
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let (Some(buf), Some(d)) = (buf, slot(nodes, grads, *var)) {
                        d.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::OverridePrefix {
                x,
                table,
                seq,
                width,
            } => {
                let d = node.value.last_dim();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (dr, gr) in dx.chunks_mut(d).zip(g.chunks(d)) {
                        dr[*width..].iter_mut().zip(&gr[*width..]).for_each(|(a, &b)| *a += b);
                    }
                }
                if let Some(dt) = slot(nodes, grads, *table) {
                    for (r, gr) in g.chunks(d).enumerate() {
                        let t = r % seq;
                        dt[t * width..(t + 1) * width]
                            .iter_mut()
                            .zip(&gr[..*width])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Ramp {
                start,
                step,
                positions,
                scale,
            } => {
                if let Some(ds) = slot(nodes, grads, *start) {
                    ds[0] += *scale * g.iter().copied().sum::<S>();
                }
                if let Some(dt) = slot(nodes, grads, *step) {
                    dt[0] += *scale * g.iter().zip(positions).map(|(&g, &p)| g * p).sum::<S>();
                }
            }
            Op::AddRows {
                x,
                table,
                seq,
                offset,
            } => {
                let d = node.value.last_dim();
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if let Some(dt) = slot(nodes, grads, *table) {
                    for (r, gr) in g.chunks(d).enumerate() {
                        let t = offset + r % seq;
                        dt[t * d..(t + 1) * d]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Rope { x, cos, sin, seq } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let mut back = g.to_vec();
                    rotate_pairs(&mut back, cos, sin, *seq, node.value.last_dim(), 2 * cos.len() / seq, true);
                    dx.iter_mut().zip(&back).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &g), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                }
            }
        }
    }
}

fn slot<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'a mut Vec<S>> {
    let node = &nodes[v.0];
    if !node.tracks {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![S::ZERO; len]))
}
