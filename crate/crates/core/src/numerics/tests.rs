use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(rand_tensor(&[2, 3], 1));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
}

#[test]
fn unreachable_grads_are_zero() {
    let mut tape = Tape::new();
    let x = tape.param(rand_tensor(&[3], 1));
    let unused = tape.param(rand_tensor(&[4], 2));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.get_or_zero(unused), vec![0.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(rand_tensor(&[3], 1));
    let y = tape.gelu(x);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn grad_check_quadratic() {
    let x = Tensor::scalar(3.0);
    let err = grad_check(|t, v| t.mul(v, v), &x, 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_softmax_then_cross_entropy() {
    let x = rand_tensor(&[3, 5], 4);
    let err = grad_check(
        |t, v| {
            let s = t.softmax_rows(v);
            let l = t.scale(s, 3.0);
            t.cross_entropy(l, &[1, 4, 0])
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_linear_and_norm() {
    let w = rand_tensor(&[4, 3], 6);
    let gain = rand_tensor(&[4], 7);
    let bias = rand_tensor(&[3], 8);
    let x = rand_tensor(&[5, 4], 5);
    // w.r.t. input
    let err = grad_check(
        |t, v| {
            let g = t.constant(gain.clone());
            let n = t.rms_norm(v, g, 1e-5)?;
            let w = t.constant(w.clone());
            let b = t.constant(bias.clone());
            let y = t.linear(n, w, Some(b))?;
            let y = t.gelu(y);
            t.cross_entropy(y, &[0, 1, 2, 2, 1])
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
    // w.r.t. weight, through the transposed path
    let wt = rand_tensor(&[3, 4], 9);
    let err = grad_check(
        |t, v| {
            let xi = t.constant(x.clone());
            let y = t.linear_t(xi, v)?;
            t.cross_entropy(y, &[0, 1, 2, 2, 1])
        },
        &wt,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
    // w.r.t. gain
    let err = grad_check(
        |t, v| {
            let xi = t.constant(x.clone());
            let n = t.rms_norm(xi, v, 1e-5)?;
            t.cross_entropy(n, &[0, 1, 2, 3, 1])
        },
        &gain,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_attention_shared_input() {
    // q, k and v are the same var, exercising gradient aliasing.
    let shape = AttnShape {
        batch: 2,
        seq: 3,
        heads: 2,
        head_dim: 2,
    };
    let x = rand_tensor(&[6, 4], 12);
    let mask = Mask::causal(3);
    let err = grad_check(
        |t, v| {
            let a = t.attention(v, v, v, shape, &mask)?;
            let w = t.constant(rand_tensor(&[4, 4], 13));
            let y = t.matmul(a, w)?;
            t.cross_entropy(y, &[0, 1, 2, 3, 0, 1])
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_rms_norm_skip() {
    let x = rand_tensor(&[3, 6], 17);
    let gain = rand_tensor(&[6], 18);
    let probe = rand_tensor(&[3, 6], 19);
    let err = grad_check(
        |t, v| {
            let g = t.constant(gain.clone());
            let y = t.rms_norm_skip(v, g, 1e-5, 2)?;
            let p = t.constant(probe.clone());
            let y = t.mul(y, p)?;
            Ok(t.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn rms_norm_skip_ignores_leading_dims_in_statistic() {
    let mut t = Tape::new();
    let g = t.constant(Tensor::full([4], 1.0));
    let a = t.leaf(Tensor::new([1, 4], vec![100.0, -7.0, 3.0, 4.0]).unwrap());
    let y = t.rms_norm_skip(a, g, 0.0, 2).unwrap();
    // rms of [3, 4] is sqrt(12.5)
    let r = 12.5f64.sqrt();
    let want = [100.0 / r, -7.0 / r, 3.0 / r, 4.0 / r];
    for (got, w) in t.value(y).data().iter().zip(want) {
        assert!((got - w).abs() < 1e-12);
    }
    assert!(t.rms_norm_skip(a, g, 0.0, 4).is_err());
}

#[test]
fn grad_check_attention_weight_dropout() {
    let shape = AttnShape {
        batch: 1,
        seq: 4,
        heads: 2,
        head_dim: 2,
    };
    let x = rand_tensor(&[4, 4], 14);
    let mask = Mask::causal(4);
    let err = grad_check(
        |t, v| {
            // Same seed on every evaluation so the dropout mask is fixed.
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let a = t.attention_dropout(v, v, v, shape, &mask, 0.4, &mut rng)?;
            let w = t.constant(rand_tensor(&[4, 4], 15));
            let y = t.matmul(a, w)?;
            t.cross_entropy(y, &[0, 1, 2, 3])
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn attention_dropout_zero_rate_matches_plain() {
    let shape = AttnShape {
        batch: 1,
        seq: 3,
        heads: 1,
        head_dim: 4,
    };
    let x = rand_tensor(&[3, 4], 16);
    let mask = Mask::causal(3);
    let mut t = Tape::new();
    let v = t.leaf(x);
    let a = t.attention(v, v, v, shape, &mask).unwrap();
    let b = t
        .attention_dropout(v, v, v, shape, &mask, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(t.value(a), t.value(b));
}

#[test]
fn grad_check_positional_ops() {
    let x = rand_tensor(&[4, 5], 21);
    let table = rand_tensor(&[2, 2], 22);
    let wide = rand_tensor(&[6, 5], 23);
    let err = grad_check(
        |t, v| {
            let tb = t.constant(table.clone());
            let o = t.override_prefix(v, tb, 2)?;
            let w = t.constant(wide.clone());
            let o = t.add_rows(o, w, 2, 3)?;
            let o = t.mul(o, o)?;
            Ok(t.sum(o))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
    let err = grad_check(
        |t, v| {
            let xi = t.constant(x.clone());
            let o = t.override_prefix(xi, v, 2)?;
            let o = t.mul(o, o)?;
            Ok(t.sum(o))
        },
        &table,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_rope_and_ramp() {
    let x = rand_tensor(&[6, 4], 31);
    let seq = 3;
    let mut cos = Vec::new();
    let mut sin = Vec::new();
    for t in 0..seq {
        for i in 0..2 {
            let ang = t as f64 * 10f64.powf(-(i as f64));
            cos.push(ang.cos());
            sin.push(ang.sin());
        }
    }
    let probe = rand_tensor(&[6, 4], 32);
    let err = grad_check(
        |t, v| {
            let r = t.rope(v, cos.clone(), sin.clone(), seq)?;
            let p = t.constant(probe.clone());
            let o = t.mul(r, p)?;
            Ok(t.sum(o))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");

    let st = Tensor::from_f64([2], &[0.3, 0.05]).unwrap();
    let err = grad_check(
        |t, v| {
            // split the 2-vector into start/step scalars via masking sums
            let mask_s = t.constant(Tensor::from_f64([2], &[1.0, 0.0])?);
            let mask_t = t.constant(Tensor::from_f64([2], &[0.0, 1.0])?);
            let s = t.mul(v, mask_s)?;
            let s = t.sum(s);
            let th = t.mul(v, mask_t)?;
            let th = t.sum(th);
            let r = t.ramp(s, th, vec![0.0, 1.0, 2.0, 5.0], 0.5, &[2, 2])?;
            let r = t.mul(r, r)?;
            Ok(t.sum(r))
        },
        &st,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_embedding_and_dropout() {
    let table = rand_tensor(&[5, 3], 41);
    let err = grad_check(
        |t, v| {
            let e = t.embedding(v, &[4, 0, 4, 2])?;
            let mut rng = seeded_rng(3);
            let e = t.dropout(e, 0.3, &mut rng);
            t.cross_entropy(e, &[0, 1, 2, 0])
        },
        &table,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn softmax_rows_sum_to_one_for_large_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e4..1e4)).collect();
        let s = softmax_rows(&Tensor::new([n], x).unwrap());
        let sum: f64 = s.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn matmul_exact_on_integers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (m, k, n) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-50..50) as f64).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-50..50) as f64).collect();
        let c = matmul(
            &Tensor::new([m, k], a.clone()).unwrap(),
            &Tensor::new([k, n], b.clone()).unwrap(),
        )
        .unwrap();
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert_eq!(c.data()[i * n + j], e);
            }
        }
    }
}
