use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor2D::from_vec(rows, cols, data).unwrap()
}

/// Direct sliding-window convolution, written independently of the kernel.
fn sliding_window(input: &Tensor2D, weight: &Tensor2D, bias: &[f64], k: usize, s: usize, p: usize) -> Tensor2D {
    let (t, din) = input.shape();
    let tout = (t + 2 * p - k) / s + 1;
    let mut padded = vec![vec![0.0; din]; t + 2 * p];
    for r in 0..t {
        padded[r + p] = input.row(r).to_vec();
    }
    let mut out = Tensor2D::zeros(tout, weight.cols());
    for i in 0..tout {
        for o in 0..weight.cols() {
            let mut acc = bias[o];
            for j in 0..k {
                for c in 0..din {
                    acc += padded[i * s + j][c] * weight.get(j * din + c, o);
                }
            }
            out.set(i, o, acc);
        }
    }
    out
}

#[test]
fn conv1d_pointwise_scaling() {
    let x = Tensor2D::column(&[1.0, 2.0, 3.0]);
    let w = Tensor2D::scalar(2.0);
    let b = Tensor2D::zeros(1, 1);
    let y = conv1d(&x, &w, &b, ConvSpec::new(1, 1, 0)).unwrap();
    assert_eq!(y.data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn conv1d_zero_padded_window() {
    let x = Tensor2D::column(&[1.0, 2.0, 3.0]);
    let w = Tensor2D::filled(3, 1, 1.0);
    let b = Tensor2D::zeros(1, 1);
    let expected = sliding_window(&x, &w, &[0.0], 3, 1, 1);
    assert_eq!(expected.data(), &[3.0, 6.0, 5.0]);
    let y = conv1d(&x, &w, &b, ConvSpec::new(3, 1, 1)).unwrap();
    assert_eq!(y.data(), expected.data());
}

#[test]
fn conv1d_strided_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 8, 4);
    let w = random(&mut rng, 12, 6);
    let b = random(&mut rng, 1, 6);
    let y = conv1d(&x, &w, &b, ConvSpec::new(3, 2, 1)).unwrap();
    assert_eq!(y.shape(), (4, 6));
    let oracle = sliding_window(&x, &w, b.data(), 3, 2, 1);
    for (a, e) in y.data().iter().zip(oracle.data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv1d_errors() {
    let x = Tensor2D::zeros(2, 3);
    let b = Tensor2D::zeros(1, 1);
    let bad_w = Tensor2D::zeros(5, 1);
    assert!(matches!(conv1d(&x, &bad_w, &b, ConvSpec::new(3, 1, 0)), Err(Error::Dimension(_))));
    let w = Tensor2D::zeros(9, 1);
    assert!(matches!(conv1d(&x, &w, &b, ConvSpec::new(3, 1, 0)), Err(Error::DegenerateLength(_))));
}

#[test]
fn pointwise_conv_equals_affine_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let t = rng.random_range(1..20);
        let din = rng.random_range(1..8);
        let dout = rng.random_range(1..8);
        let x = random(&mut rng, t, din);
        let w = random(&mut rng, din, dout);
        let b = random(&mut rng, 1, dout);
        let y = conv1d(&x, &w, &b, ConvSpec::new(1, 1, 0)).unwrap();
        let mut z = matmul(&x, &w, false).unwrap();
        for r in 0..t {
            for (v, bv) in z.row_mut(r).iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        for (a, e) in y.data().iter().zip(z.data()) {
            assert!((a - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn linear_gradient_replicates_input() {
    let mut g = Graph::new();
    let w = g.param(Tensor2D::from_rows(&[[1.0, -2.0, 0.5], [0.3, 0.0, 4.0]], 3).unwrap());
    let x = g.constant(Tensor2D::column(&[0.7, -1.1, 2.5]));
    let wx = g.matmul(w, x).unwrap();
    let loss = g.sum(wx).unwrap();
    let grads = g.backward(loss).unwrap();
    let gw = grads.get(w).unwrap();
    for r in 0..2 {
        assert_eq!(gw.row(r), &[0.7, -1.1, 2.5]);
    }
    assert!(grads.get(x).is_none());
}

#[test]
fn sigmoid_gradient_at_origin() {
    let mut g = Graph::new();
    let w = g.param(Tensor2D::scalar(0.0));
    let x = g.constant(Tensor2D::scalar(1.0));
    let wx = g.mul(w, x).unwrap();
    let s = g.sigmoid(wx).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(w).unwrap().item().unwrap(), 0.25);
    let fd = finite_difference_check(&mut g, s, 1e-4).unwrap();
    assert!(fd < 1e-8);
}

#[test]
fn backward_overwrites_unless_accumulating() {
    let mut g = Graph::new();
    let w = g.param(Tensor2D::row_vector(&[1.0, 2.0]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    let first = g.backward(loss).unwrap().get(w).unwrap().clone();
    let second = g.backward(loss).unwrap().get(w).unwrap().clone();
    assert_eq!(first, second);
    assert_eq!(first.data(), &[2.0, 4.0]);
    let third = g.backward_accumulate(loss).unwrap().get(w).unwrap().clone();
    assert_eq!(third.data(), &[4.0, 8.0]);
    assert_eq!(g.grad(w).unwrap().data(), &[4.0, 8.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let w = g.param(Tensor2D::row_vector(&[1.0, 2.0]));
    let y = g.relu(w).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn finite_difference_affine_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, 6, 3));
    let w = g.param(random(&mut rng, 3, 4));
    let b = g.param(random(&mut rng, 1, 4));
    let y = g.affine(x, w, b).unwrap();
    let loss = g.sum(y).unwrap();
    assert!(finite_difference_check(&mut g, loss, 1e-4).unwrap() <= 1e-8);
}

#[test]
fn finite_difference_conv_relu_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, 10, 3));
    let w = g.param(random(&mut rng, 9, 4));
    let b = g.param(random(&mut rng, 1, 4));
    let c = g.conv1d(x, w, b, ConvSpec::new(3, 1, 1)).unwrap();
    let r = g.relu(c).unwrap();
    let loss = g.mean(r).unwrap();
    // pre-activations must stay clear of the kink for central differences
    assert!(g.value(c).data().iter().all(|v| v.abs() > 1e-3));
    assert!(finite_difference_check(&mut g, loss, 1e-4).unwrap() <= 1e-4);
}

#[test]
fn finite_difference_rejects_bad_step() {
    let mut g = Graph::new();
    let w = g.param(Tensor2D::scalar(1.0));
    let loss = g.sum(w).unwrap();
    assert!(matches!(finite_difference_check(&mut g, loss, 0.0), Err(Error::Contract(_))));
    assert!(matches!(finite_difference_check(&mut g, loss, 0.1), Err(Error::Contract(_))));
}

struct LogObjective;

impl Objective for LogObjective {
    fn evaluate(&self, input: &Tensor2D) -> Result<(f64, Tensor2D)> {
        let v = input.data()[0];
        Ok((v.ln(), Tensor2D::scalar(1.0 / v)))
    }

    fn name(&self) -> &str {
        "log"
    }
}

#[test]
fn finite_difference_reports_instability() {
    let mut g = Graph::new();
    let w = g.param(Tensor2D::scalar(1e-5));
    let loss = g.objective(w, Arc::new(LogObjective)).unwrap();
    assert!(matches!(finite_difference_check(&mut g, loss, 1e-4), Err(Error::NumericalInstability(_))));
}

/// Builds a random graph exercising one op kind and returns the loss node.
fn build_case(rng: &mut ChaCha8Rng, kind: usize) -> (Graph, NodeId) {
    let mut g = Graph::new();
    let t = rng.random_range(3..9);
    let d = rng.random_range(1..5);
    let dout = rng.random_range(1..5);
    let x = g.param(random(rng, t, d));
    let weights = g.constant(random(rng, t, dout));
    let out = match kind {
        0 => {
            let k = rng.random_range(1..4);
            let s = rng.random_range(1..3);
            let p = rng.random_range(0..2);
            let w = g.param(random(rng, k * d, dout));
            let b = g.param(random(rng, 1, dout));
            let y = g.conv1d(x, w, b, ConvSpec::new(k, s, p)).unwrap();
            let mask = g.constant(random(rng, g.value(y).rows(), dout));
            g.mul(y, mask).unwrap()
        }
        1 => {
            let w = g.param(random(rng, d, dout));
            let b = g.param(random(rng, 1, dout));
            let y = g.affine(x, w, b).unwrap();
            g.mul(y, weights).unwrap()
        }
        2 => {
            let w = g.param(random(rng, dout, d));
            let y = g.matmul_t(x, w).unwrap();
            g.mul(y, weights).unwrap()
        }
        3 => {
            let w = g.param(random(rng, d, dout));
            let y = g.matmul(x, w).unwrap();
            g.mul(y, weights).unwrap()
        }
        4 => {
            // shift away from the kink
            let data: Vec<f64> = g.value(x).data().iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect();
            let shifted = Tensor2D::from_vec(t, d, data).unwrap();
            g.set_leaf(x, shifted).unwrap();
            let y = g.relu(x).unwrap();
            let m = g.constant(random(rng, t, d));
            g.mul(y, m).unwrap()
        }
        5 => {
            let y = g.sigmoid(x).unwrap();
            let m = g.constant(random(rng, t, d));
            g.mul(y, m).unwrap()
        }
        6 => {
            let start = rng.random_range(0..t - 1);
            let end = rng.random_range(start + 1..=t);
            let y = g.mean_rows(x, start, end).unwrap();
            let m = g.constant(random(rng, 1, d));
            g.mul(y, m).unwrap()
        }
        7 => {
            let other = g.param(random(rng, t, d));
            let y = g.add(x, other).unwrap();
            let z = g.mul(y, other).unwrap();
            g.scale(z, 0.7).unwrap()
        }
        8 => {
            let other = g.param(random(rng, 2, d));
            let y = g.concat_rows(&[x, other]).unwrap();
            let m = g.constant(random(rng, t + 2, d));
            let z = g.mul(y, m).unwrap();
            let start = rng.random_range(0..d);
            g.slice_cols(z, start, d).unwrap()
        }
        _ => {
            let y = g.normalize_rows(x, 1e-12).unwrap();
            let m = g.constant(random(rng, t, d));
            g.mul(y, m).unwrap()
        }
    };
    let loss = if rng.random_bool(0.5) { g.sum(out).unwrap() } else { g.mean(out).unwrap() };
    (g, loss)
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for kind in 0..10 {
        for _ in 0..100 {
            let (mut g, loss) = build_case(&mut rng, kind);
            let err = finite_difference_check(&mut g, loss, 1e-5).unwrap();
            assert!(err <= 1e-4, "op kind {kind}: relative error {err}");
        }
    }
}

#[test]
fn evaluation_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (mut g, loss) = build_case(&mut rng, 0);
        g.forward().unwrap();
        let grads = g.backward(loss).unwrap();
        let v = g.value(loss).item().unwrap();
        (v.to_bits(), grads.iter().flat_map(|(_, t)| t.data().to_vec()).map(f64::to_bits).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
