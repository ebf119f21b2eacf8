//! Finite-difference validation of the autodiff engine: every exported op
//! over many random trials, then composed update chains of the kind the
//! meta-loop differentiates.

use std::sync::Arc;

use tca_core::diffmath::gradcheck::{check_gradients, run_op_suite, DEFAULT_FD_STEP};
use tca_core::diffmath::{DiffValue, Mat, Tape};

#[test]
fn every_op_passes_one_hundred_random_trials() {
    for check in run_op_suite(100, 0xA11CE).unwrap() {
        assert!(
            check.max_rel_err < 1e-6,
            "{}: max rel err {} over {} trials",
            check.name,
            check.max_rel_err,
            check.trials
        );
    }
}

/// theta' = theta + alpha * g(theta, eta) with a nonlinear g, twice.
/// The loss after two updates must differentiate to finite-difference
/// accuracy with respect to both leaves.
#[test]
fn two_composed_updates_match_finite_differences() {
    let build = |tape: &mut Tape, xs: &[DiffValue]| {
        let (mut theta, eta) = (xs[0], xs[1]);
        let alpha = 0.3;
        for _ in 0..2 {
            // g = sigmoid(eta) * theta^2  (elementwise), a stand-in for a
            // gradient that mixes both parameters.
            let w = tape.sigmoid(eta)?;
            let t2 = tape.square(theta)?;
            let g = tape.mul(w, t2)?;
            let step = tape.mul_scalar(g, alpha)?;
            theta = tape.add(theta, step)?;
        }
        let sq = tape.square(theta)?;
        tape.sum(sq)
    };
    let inputs = vec![
        Mat::from_vec(2, 2, vec![0.4, -0.2, 0.1, 0.7]),
        Mat::from_vec(2, 2, vec![-0.5, 0.3, 0.9, -1.1]),
    ];
    let err = check_gradients(build, &inputs, DEFAULT_FD_STEP).unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

/// Sixteen SGD updates followed by a scalar loss: the gradient with respect
/// to the meta-leaf must survive the whole chain.
#[test]
fn sixteen_update_chain_matches_finite_differences() {
    let build = |tape: &mut Tape, xs: &[DiffValue]| {
        let eta = xs[0];
        let mut theta = tape.constant(Mat::from_vec(1, 3, vec![0.1, -0.3, 0.2]))?;
        for _ in 0..16 {
            let w = tape.sigmoid(eta)?;
            let mix = tape.mul(w, theta)?;
            let s = tape.sigmoid(mix)?;
            let g = tape.add_scalar(s, -0.5)?;
            let step = tape.mul_scalar(g, 0.1)?;
            theta = tape.sub(theta, step)?;
        }
        let sq = tape.square(theta)?;
        tape.sum(sq)
    };
    let inputs = vec![Mat::from_vec(1, 3, vec![0.2, -0.4, 0.6])];
    let err = check_gradients(build, &inputs, DEFAULT_FD_STEP).unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

/// Adam arithmetic written in tape ops: gradients flow through the moment
/// recursions across several steps.
#[test]
fn adam_update_chain_matches_finite_differences() {
    use tca_core::agent::{Direction, OptimConfig, TapedOptim};

    let build = |tape: &mut Tape, xs: &[DiffValue]| {
        let eta = xs[0];
        let mut theta = tape.constant(Mat::from_vec(1, 2, vec![0.3, -0.6]))?;
        let mut opt = TapedOptim::fresh(tape, OptimConfig::adam(0.05), 1, 2).unwrap();
        for _ in 0..4 {
            let w = tape.sigmoid(eta)?;
            let g = tape.mul(w, theta)?;
            theta = opt.apply(tape, theta, g, Direction::Descent).unwrap();
        }
        let sq = tape.square(theta)?;
        tape.sum(sq)
    };
    let inputs = vec![Mat::from_vec(1, 2, vec![0.5, -0.2])];
    let err = check_gradients(build, &inputs, DEFAULT_FD_STEP).unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

/// Entropy regularization pushes a deterministic policy toward uniform, and
/// its gradient is finite-difference exact.
#[test]
fn entropy_gradient_matches_finite_differences_and_points_to_uniform() {
    let counts = Arc::new(vec![2usize, 1]);
    let build = |tape: &mut Tape, xs: &[DiffValue]| {
        let counts = Arc::new(vec![2usize, 1]);
        let h = tape.entropy_rows_masked(xs[0], &counts)?;
        tape.sum(h)
    };
    // Strongly peaked logits on the two-action row.
    let inputs = vec![Mat::from_vec(2, 2, vec![2.0, -2.0, 0.3, 0.0])];
    let err = check_gradients(build, &inputs, DEFAULT_FD_STEP).unwrap();
    assert!(err < 1e-6, "max rel err {err}");

    let mut tape = Tape::new();
    let x = tape.param(inputs[0].clone()).unwrap();
    let h = tape.entropy_rows_masked(x, &counts).unwrap();
    let obj = tape.sum(h).unwrap();
    let g = tape.grad_nodes(obj, &[x]).unwrap()[0].unwrap();
    let gmat = tape.value(g).clone();
    // Ascent on entropy lowers the dominant logit and raises the other.
    assert!(gmat[(0, 0)] < 0.0 && gmat[(0, 1)] > 0.0);
    // Single-action row gets no gradient.
    assert_eq!(gmat[(1, 0)], 0.0);
    assert_eq!(gmat[(1, 1)], 0.0);
}
