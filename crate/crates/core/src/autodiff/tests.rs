// SPDX-License-Identifier: MIT OR Apache-2.0

use std::cell::Cell;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn vec_t(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec()).unwrap()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(vec_t(&[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 5], 3.7));
    let y = tape.layer_norm(x, 1, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec_t(&[1.0, 2.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let y = tape.sum_all(sq).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn grad_of_linear_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(5.0), true);
    let y = tape.scale(x, 3.0).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0]);
}

#[test]
fn grad_of_softmax_component() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec_t(&[0.0, 0.0]), true);
    let p = tape.softmax(x, 0).unwrap();
    let p0 = tape.slice(p, 0, 0, 1).unwrap();
    let y = tape.sum_all(p0).unwrap();
    tape.backward(y).unwrap();
    let g = tape.grad(x).unwrap().data();
    assert!((g[0] - 0.25).abs() < 1e-15);
    assert!((g[1] + 0.25).abs() < 1e-15);
}

fn composite(tape: &mut Tape, x: Var) -> crate::Result<Var> {
    // x: [2, 3]
    let w = tape.constant(Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]).unwrap());
    let h = tape.matmul(x, w)?;
    let t = tape.tanh(h)?;
    let s = tape.softmax(t, 1)?;
    let e = tape.exp(x)?;
    let m = tape.mean(e, 1)?;
    let l = tape.ln(m)?;
    let a = tape.sum_all(s)?;
    let b = tape.sum_all(l)?;
    let c = tape.mul(a, b)?;
    let d = tape.sum_all(t)?;
    tape.add(c, d)
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![2, 3], data).unwrap();
        let report = finite_difference_check(composite, &x, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
        assert_eq!(report.checked, 6);
    }
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec_t(&[1.0, 2.0]), true);
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
}

#[test]
fn double_backward_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
}

#[test]
fn root_without_differentiable_leaf_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(2.0));
    let y = tape.mul(x, x).unwrap();
    assert!(tape.backward(y).is_err());
}

#[test]
fn domain_and_shape_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(vec_t(&[1.0, -1.0]));
    let b = tape.constant(vec_t(&[1.0, 0.0]));
    let c = tape.constant(vec_t(&[1.0, 2.0, 3.0]));
    assert!(matches!(tape.ln(a), Err(Error::Domain { .. })));
    assert!(matches!(tape.div(a, b), Err(Error::Domain { .. })));
    assert!(matches!(tape.add(a, c), Err(Error::Shape { .. })));
    assert!(matches!(tape.matmul(a, c), Err(Error::Shape { .. })));
    assert!(matches!(tape.layer_norm(a, 0, 0.0), Err(Error::Domain { .. })));
    assert!(matches!(tape.dropout(a, 1.0, 0, true), Err(Error::Domain { .. })));
}

#[test]
fn overflow_is_reported_as_non_finite() {
    let mut tape = Tape::new();
    let a = tape.constant(vec_t(&[1000.0]));
    assert!(matches!(tape.exp(a), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn dropout_identities() {
    let mut tape = Tape::new();
    let x = tape.constant(vec_t(&[1.0, 2.0, 3.0]));
    assert_eq!(tape.dropout(x, 0.0, 9, true).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.5, 9, false).unwrap(), x);
    let a = tape.dropout(x, 0.5, 9, true).unwrap();
    let b = tape.dropout(x, 0.5, 9, true).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    for (&v, &orig) in tape.value(a).data().iter().zip(&[1.0, 2.0, 3.0]) {
        assert!(v == 0.0 || v == 2.0 * orig);
    }
}

#[test]
fn broadcasting_bias_gradient_sums_rows() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap());
    let b = tape.leaf(vec_t(&[0.5, -0.5]), true);
    let y = tape.add(x, b).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(b).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn fd_check_linear_is_exact() {
    let w = vec_t(&[0.5, -1.5, 2.0]);
    let f = |tape: &mut Tape, x: Var| {
        let wv = tape.constant(w.clone());
        let p = tape.mul(x, wv)?;
        tape.sum_all(p)
    };
    let report = finite_difference_check(f, &vec_t(&[0.1, 0.2, 0.3]), 1e-5).unwrap();
    assert!(report.max_rel_error <= 1e-10, "{report:?}");
}

#[test]
fn fd_check_exp_sum_is_step_stable() {
    let f = |tape: &mut Tape, x: Var| {
        let s = tape.sum_all(x)?;
        tape.exp(s)
    };
    let x = vec_t(&[0.01, -0.02, 0.03]);
    let coarse = finite_difference_check(f, &x, 1e-5).unwrap();
    let fine = finite_difference_check(f, &x, 1e-6).unwrap();
    assert!(coarse.max_rel_error <= 1e-6);
    assert!(fine.max_rel_error <= 1e-6);
}

#[test]
fn fd_check_skips_relu_kink() {
    let f = |tape: &mut Tape, x: Var| {
        let r = tape.relu(x)?;
        tape.sum_all(r)
    };
    let report = finite_difference_check(f, &vec_t(&[0.0, 0.5, 1e-6]), 1e-7).unwrap();
    assert_eq!(report.skipped, vec![0, 2]);
    assert_eq!(report.checked, 1);
}

#[test]
fn fd_check_detects_non_determinism() {
    let calls = Cell::new(0u32);
    let f = |tape: &mut Tape, x: Var| {
        calls.set(calls.get() + 1);
        let y = tape.sum_all(x)?;
        tape.scale(y, f64::from(calls.get()))
    };
    let err = finite_difference_check(f, &vec_t(&[1.0]), 1e-5).unwrap_err();
    assert!(matches!(err, Error::NonDeterministic(_)));
}

#[test]
fn concat_and_slice_round_trip_gradients() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let b = tape.leaf(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap(), true);
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let s = tape.slice(c, 1, 1, 3).unwrap();
    assert_eq!(tape.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
    let y = tape.sum_all(s).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn embedding_gradient_scatters() {
    let mut tape = Tape::new();
    let table = tape.leaf(Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap(), true);
    let e = tape.embedding(table, &[2, 0, 2]).unwrap();
    let y = tape.sum_all(e).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    assert!(tape.embedding(table, &[3]).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        for axis in 0..2 {
            let y = tape.softmax(x, axis).unwrap();
            let s = tape.sum(y, axis).unwrap();
            prop_assert!(tape.value(y).data().iter().all(|&p| p >= 0.0));
            for &total in tape.value(s).data() {
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn replay_is_bitwise_identical(data in proptest::collection::vec(-2.0f64..2.0, 6), seed in any::<u64>()) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![2, 3], data.clone()).unwrap());
            let d = tape.dropout(x, 0.3, seed, true).unwrap();
            let n = tape.layer_norm(d, 1, 1e-5).unwrap();
            let s = tape.softmax(n, 1).unwrap();
            tape.value(s).clone()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
