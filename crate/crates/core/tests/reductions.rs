//! Estimator reduction identities over random trajectories:
//! lambda = 1 recovers Monte-Carlo; pairwise weights on the exponential
//! schedule recover the lambda estimator; pairwise reward weights on the
//! discount schedule recover Monte-Carlo.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tca_core::agent::Trajectory;
use tca_core::credit::{
    lambda_advantages, mc_advantages, pwr_return_and_advantages, pwtd_advantages, WeightsNode,
};
use tca_core::diffmath::{Mat, Tape};

const TOL: f64 = 1e-12;

fn random_trajectory(rng: &mut ChaCha8Rng, num_states: usize) -> Trajectory {
    let t_len = rng.random_range(1..=12);
    let states = (0..=t_len).map(|_| rng.random_range(0..num_states)).collect();
    let actions = (0..t_len).map(|_| rng.random_range(0..2)).collect();
    let rewards = (0..t_len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let log_probs = vec![0.0; t_len];
    Trajectory::new(states, actions, rewards, log_probs)
}

fn random_values(rng: &mut ChaCha8Rng, num_states: usize) -> Vec<f64> {
    (0..num_states).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn assert_close(a: &[f64], b: &[f64], what: &str) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= TOL, "{what}: {x} vs {y}");
    }
}

#[test]
fn reduction_identities_over_one_thousand_random_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let num_states = 9;
    for _ in 0..1000 {
        let traj = random_trajectory(&mut rng, num_states);
        let values = random_values(&mut rng, num_states);
        let gamma = rng.random_range(0.9..=1.0);
        let lambda = rng.random_range(0.0..=1.0);

        // lambda = 1 recovers MC.
        let mc = mc_advantages(&traj, &values, gamma);
        let lam1 = lambda_advantages(&traj, &values, gamma, 1.0).unwrap();
        assert_close(&mc, &lam1, "lambda=1 vs mc");

        // Exponential pairwise TD weights recover the lambda estimator.
        let mut tape = Tape::new();
        let pwtd = pwtd_advantages(
            &mut tape,
            &traj,
            &values,
            &WeightsNode::Exponential { lambda },
            gamma,
        )
        .unwrap();
        let lam = lambda_advantages(&traj, &values, gamma, lambda).unwrap();
        assert_close(tape.value(pwtd).as_slice(), &lam, "pwtd-exp vs lambda");

        // Discount pairwise reward weights recover MC.
        let baseline = tape.constant(Mat::col(&values)).unwrap();
        let (_, pwr) =
            pwr_return_and_advantages(&mut tape, &traj, baseline, &WeightsNode::Discount, gamma)
                .unwrap();
        assert_close(tape.value(pwr).as_slice(), &mc, "pwr-discount vs mc");
    }
}

#[test]
fn pairwise_estimator_gradients_match_finite_differences() {
    use tca_core::diffmath::gradcheck::check_gradients;

    let mut rng = ChaCha8Rng::seed_from_u64(0x9AD);
    let num_states = 6;
    for trial in 0..50 {
        let traj = random_trajectory(&mut rng, num_states);
        let values = random_values(&mut rng, num_states);
        let eta = {
            let data = (0..num_states * num_states)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Mat::from_vec(num_states, num_states, data)
        };
        let probe: Vec<f64> = (0..traj.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

        for use_pwr in [false, true] {
            let traj = traj.clone();
            let values = values.clone();
            let probe = probe.clone();
            let err = check_gradients(
                move |tape, xs| {
                    let w = tape.sigmoid(xs[0])?;
                    let adv = if use_pwr {
                        let baseline = tape.constant(Mat::col(&values))?;
                        pwr_return_and_advantages(
                            tape,
                            &traj,
                            baseline,
                            &WeightsNode::Table(w),
                            1.0,
                        )
                        .map_err(unwrap_diff)?
                        .1
                    } else {
                        pwtd_advantages(tape, &traj, &values, &WeightsNode::Table(w), 1.0)
                            .map_err(unwrap_diff)?
                    };
                    let p = tape.constant_col(&probe)?;
                    tape.dot(adv, p)
                },
                std::slice::from_ref(&eta),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "trial {trial} (pwr={use_pwr}): max rel err {err}");
        }
    }
}

fn unwrap_diff(e: tca_core::CoreError) -> tca_core::diffmath::DiffError {
    match e {
        tca_core::CoreError::Diff(d) => d,
        other => panic!("unexpected error: {other}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The same identities as property tests over arbitrary shapes.
    #[test]
    fn reductions_hold_for_arbitrary_trajectories(
        seed in any::<u64>(),
        gamma in 0.8f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traj = random_trajectory(&mut rng, 7);
        let values = random_values(&mut rng, 7);

        let mc = mc_advantages(&traj, &values, gamma);
        let lam1 = lambda_advantages(&traj, &values, gamma, 1.0).unwrap();
        for (x, y) in mc.iter().zip(&lam1) {
            prop_assert!((x - y).abs() <= TOL);
        }

        let mut tape = Tape::new();
        let pwtd = pwtd_advantages(
            &mut tape, &traj, &values, &WeightsNode::Exponential { lambda }, gamma,
        ).unwrap();
        let lam = lambda_advantages(&traj, &values, gamma, lambda).unwrap();
        for (x, y) in tape.value(pwtd).as_slice().iter().zip(&lam) {
            prop_assert!((x - y).abs() <= TOL);
        }
    }

    /// A trajectory replayed through the estimators is bit-stable.
    #[test]
    fn estimators_are_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traj = random_trajectory(&mut rng, 5);
        let values = random_values(&mut rng, 5);
        let a = lambda_advantages(&traj, &values, 0.97, 0.6).unwrap();
        let b = lambda_advantages(&traj, &values, 0.97, 0.6).unwrap();
        prop_assert_eq!(a, b);
    }
}
