use super::*;
use crate::rng;

fn t(data: &[f64]) -> Tensor {
    Tensor::from_vec(data.to_vec())
}

#[test]
fn add_elementwise() {
    let out = eval_op("add", &[&t(&[1.0, 2.0]), &t(&[3.0, 4.0])], &Attrs::default()).unwrap();
    assert_eq!(out.data(), &[4.0, 6.0]);
}

#[test]
fn softmax_symmetry() {
    let out = eval_op("softmax", &[&t(&[0.0, 0.0])], &Attrs::default()).unwrap();
    assert_eq!(out.data(), &[0.5, 0.5]);
}

#[test]
fn cosine_similarity_identity() {
    let v = t(&[0.3, -1.2, 0.7]);
    let out = eval_op("cosine_similarity", &[&v, &v], &Attrs::default()).unwrap();
    assert!((out.item().unwrap() - 1.0).abs() < 1e-12);
    let z = t(&[0.0, 0.0]);
    assert!(eval_op("cosine_similarity", &[&z, &z], &Attrs::default()).is_err());
}

#[test]
fn shape_errors_name_the_op() {
    let err = eval_op("add", &[&t(&[1.0, 2.0]), &t(&[1.0, 2.0, 3.0])], &Attrs::default()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("add"), "{}", msg);
    assert!(msg.contains("[2]") && msg.contains("[3]"), "{}", msg);
}

#[test]
fn non_finite_inputs_are_rejected() {
    let bad = t(&[1.0, f64::NAN]);
    assert!(eval_op("sum", &[&bad], &Attrs::default()).is_err());
}

#[test]
fn backward_polynomial() {
    // loss = sum(x*x), x = [1,2,3] -> grad [2,4,6]
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1.0, 2.0, 3.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1.0, 2.0]), true);
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(crate::Error::NonScalarLoss(_))));
}

#[test]
fn backward_without_tracked_inputs_errors() {
    let mut tape = Tape::new();
    let c = tape.constant(t(&[1.0, 2.0]));
    let loss = tape.sum(c).unwrap();
    assert!(matches!(tape.backward(loss), Err(crate::Error::NoTrackedInputs)));
}

#[test]
fn backward_twice_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1.0]), true);
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(crate::Error::TapeConsumed)));
}

#[test]
fn scalar_broadcast_binary() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1.0, 2.0, 3.0]), true);
    let s = tape.leaf(Tensor::scalar(2.0), true);
    let y = tape.mul(x, s).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0]);
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    assert_eq!(tape.grad(s).unwrap().data(), &[6.0]);
}

#[test]
fn grad_check_sum_is_exact() {
    let x = t(&[0.4, -0.2, 0.9]);
    let err = grad_check(|tape, v| tape.sum(v), &x, 1e-4).unwrap();
    assert!(err <= 1e-8, "err = {err}");
}

#[test]
fn grad_check_sum_exp() {
    let x = t(&[0.1, -0.3, 0.05, 0.2]);
    let err = grad_check(
        |tape, v| {
            let e = tape.exp(v)?;
            tape.sum(e)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-4, "err = {err}");
}

#[test]
fn grad_check_composed_graph() {
    // softmax -> log -> mix with layer_norm branch -> cosine against a
    // constant; exercises reductions, normalization and fused scalars.
    let gamma = t(&[1.1, 0.9, 1.0, 1.2]);
    let beta = t(&[0.0, 0.1, -0.1, 0.05]);
    let target = t(&[0.5, -0.2, 0.8, 0.3, -0.6, 0.9, 0.2, 0.1]);
    let x = Tensor::new(vec![2, 4], vec![0.3, -0.4, 0.8, 0.1, -0.2, 0.5, -0.7, 0.9]).unwrap();
    let err = grad_check(
        |tape, v| {
            let g = tape.constant(gamma.clone());
            let b = tape.constant(beta.clone());
            let ln = tape.layer_norm(v, g, b, 1e-5)?;
            let sm = tape.softmax(v)?;
            let shifted = tape.add_scalar(sm, 1e-3)?;
            let lg = tape.log(shifted)?;
            let mixed = tape.add(ln, lg)?;
            let tgt = tape.constant(target.clone());
            let flat = tape.reshape(mixed, vec![8])?;
            let cs = tape.cosine_similarity(flat, tgt)?;
            let se = tape.squared_error(flat, tgt)?;
            let scaled = tape.scale(se, 0.1)?;
            tape.add(cs, scaled)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-4, "err = {err}");
}

#[test]
fn every_registered_op_passes_grad_check() {
    for (name, slot, err) in sweep_grad_checks(11, 1e-4).unwrap() {
        assert!(err <= 1e-4, "op {name} input {slot}: err = {err}");
    }
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng::stream_rng(3, rng::STREAM_INIT);
    let x = rng::randn(&[2, 8, 8], &mut r);
    let w = rng::randn(&[4, 2, 3, 3], &mut r);
    let b = rng::randn(&[4], &mut r);
    let attrs = Attrs { pad: Some(1), ..Attrs::default() };
    let a = eval_op("conv2d", &[&x, &w, &b], &attrs).unwrap();
    let bb = eval_op("conv2d", &[&x, &w, &b], &attrs).unwrap();
    assert!(a.bits_eq(&bb));
}

#[test]
fn unknown_op_is_rejected() {
    assert!(eval_op("frobnicate", &[], &Attrs::default()).is_err());
}

#[test]
fn patchify_layout_and_slice() {
    // 1-channel 4x4 image, patch 2: row 0 of the output is the top-left patch
    let x = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
    let out = eval_op("patchify", &[&x], &Attrs { patch: Some(2), ..Attrs::default() }).unwrap();
    assert_eq!(out.shape(), &[4, 4]);
    assert_eq!(&out.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&out.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn softmax_rows_live_on_the_simplex() {
    use proptest::prelude::*;
    let mut runner = proptest::test_runner::TestRunner::default();
    runner
        .run(&proptest::collection::vec(-10.0f64..10.0, 2..24), |vals| {
            let n = vals.len();
            let out = eval_op("softmax", &[&Tensor::from_vec(vals)], &Attrs::default()).unwrap();
            prop_assert!(out.data().iter().all(|&v| v >= 0.0));
            let s: f64 = out.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "sum over {} = {}", n, s);
            Ok(())
        })
        .unwrap();
}
