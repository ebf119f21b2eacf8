//! Advantage estimators.
//!
//! Four interchangeable strategies compute per-step advantages for a
//! trajectory: plain Monte-Carlo, the lambda estimator, and the two pairwise
//! forms (weighted TD errors and weighted rewards). Each is registered under
//! a name and selected at runtime; the pairwise ones consume a weight source
//! and produce tape values so gradients can flow back to the meta-parameters.

use std::sync::Arc;

use crate::agent::Trajectory;
use crate::diffmath::{DiffValue, Tape};
use crate::{CoreError, Result};

/// Where pairwise weights come from. `Table` reads w(s_t, s_t') from a matrix
/// node (learned or handcrafted); the other two are the closed-form schedules
/// that reproduce the classical estimators, as functions of the time interval
/// t' - t.
#[derive(Debug, Clone, Copy)]
pub enum WeightsNode {
    Table(DiffValue),
    /// w = (gamma * lambda)^(t' - t - 1)
    Exponential { lambda: f64 },
    /// w = gamma^(t' - t - 1)
    Discount,
}

/// One-step TD errors delta_1..delta_T from a value table, with the value of
/// the state entered on the final transition taken as 0 (episodes here are
/// complete, never truncated).
pub fn td_errors(traj: &Trajectory, values: &[f64], gamma: f64) -> Vec<f64> {
    let t_len = traj.len();
    (0..t_len)
        .map(|k| {
            let v_next = if k + 1 == t_len { 0.0 } else { values[traj.states[k + 1]] };
            traj.rewards[k] + gamma * v_next - values[traj.states[k]]
        })
        .collect()
}

/// Monte-Carlo advantages: discounted return-to-go minus the baseline.
pub fn mc_advantages(traj: &Trajectory, values: &[f64], gamma: f64) -> Vec<f64> {
    traj.returns(gamma)
        .into_iter()
        .zip(&traj.states)
        .map(|(g, &s)| g - values[s])
        .collect()
}

/// Lambda advantages: exponentially weighted sums of TD errors with decay
/// gamma * lambda.
pub fn lambda_advantages(
    traj: &Trajectory,
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::Estimator(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let delta = td_errors(traj, values, gamma);
    let t_len = traj.len();
    let mut adv = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        acc = delta[t] + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// All ordered in-trajectory pairs (t, t') with t' > t, flattened in row
/// order, together with the per-t run lengths used to reduce pair terms back
/// to per-step sums.
type PairLayout = (Arc<Vec<(usize, usize)>>, Arc<Vec<usize>>);

fn pair_layout(traj: &Trajectory) -> PairLayout {
    let t_len = traj.len();
    let mut pairs = Vec::with_capacity(t_len * (t_len + 1) / 2);
    for t in 0..t_len {
        for tp in t + 1..=t_len {
            pairs.push((traj.states[t], traj.states[tp]));
        }
    }
    let lengths = (0..t_len).map(|t| t_len - t).collect();
    (Arc::new(pairs), Arc::new(lengths))
}

/// Per-pair weights as a column tape value, in the order of `pair_layout`.
fn pair_weights(
    tape: &mut Tape,
    traj: &Trajectory,
    weights: &WeightsNode,
    gamma: f64,
) -> Result<(DiffValue, Arc<Vec<usize>>)> {
    let (pairs, lengths) = pair_layout(traj);
    let node = match *weights {
        WeightsNode::Table(w) => tape.gather(w, &pairs)?,
        WeightsNode::Exponential { lambda } => {
            let vals = schedule(traj.len(), |interval| (gamma * lambda).powi(interval as i32 - 1));
            tape.constant_col(&vals)?
        }
        WeightsNode::Discount => {
            let vals = schedule(traj.len(), |interval| gamma.powi(interval as i32 - 1));
            tape.constant_col(&vals)?
        }
    };
    Ok((node, lengths))
}

fn schedule(t_len: usize, w: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut vals = Vec::with_capacity(t_len * (t_len + 1) / 2);
    for t in 0..t_len {
        for tp in t + 1..=t_len {
            vals.push(w(tp - t));
        }
    }
    vals
}

/// Pairwise-weighted TD advantages: for each step t, the sum over t' > t of
/// w(S_t, S_t') * delta_t'. Differentiable in the weight table.
pub fn pwtd_advantages(
    tape: &mut Tape,
    traj: &Trajectory,
    values: &[f64],
    weights: &WeightsNode,
    gamma: f64,
) -> Result<DiffValue> {
    let delta = td_errors(traj, values, gamma);
    let per_pair: Vec<f64> = pair_interval_values(traj.len(), &delta);
    let (w, lengths) = pair_weights(tape, traj, weights, gamma)?;
    let d = tape.constant_col(&per_pair)?;
    let prod = tape.mul(w, d)?;
    Ok(tape.segment_sum(prod, &lengths)?)
}

/// Pairwise-weighted returns and advantages: G_t = sum over t' > t of
/// w(S_t, S_t') * R_t', advantage = G_t - v(S_t) with v read from the
/// weighted-return baseline node. Both are differentiable in the weight
/// table (and in the baseline when it is a parameter).
pub fn pwr_return_and_advantages(
    tape: &mut Tape,
    traj: &Trajectory,
    weighted_baseline: DiffValue,
    weights: &WeightsNode,
    gamma: f64,
) -> Result<(DiffValue, DiffValue)> {
    let per_pair: Vec<f64> = pair_interval_values(traj.len(), &traj.rewards);
    let (w, lengths) = pair_weights(tape, traj, weights, gamma)?;
    let r = tape.constant_col(&per_pair)?;
    let prod = tape.mul(w, r)?;
    let returns = tape.segment_sum(prod, &lengths)?;
    let state_pairs: Arc<Vec<(usize, usize)>> =
        Arc::new(traj.states[..traj.len()].iter().map(|&s| (s, 0)).collect());
    let v = tape.gather(weighted_baseline, &state_pairs)?;
    let adv = tape.sub(returns, v)?;
    Ok((returns, adv))
}

/// Spread per-transition values delta_1..delta_T across the pair layout:
/// pair (t, t') carries the value indexed by t'.
fn pair_interval_values(t_len: usize, per_step: &[f64]) -> Vec<f64> {
    let mut vals = Vec::with_capacity(t_len * (t_len + 1) / 2);
    for t in 0..t_len {
        for tp in t + 1..=t_len {
            vals.push(per_step[tp - 1]);
        }
    }
    vals
}

/// Inputs an estimator draws on. `values` is the regular-return table used
/// for baselines and TD errors; `weighted_baseline` is the tape node of the
/// weighted-return baseline (PWR only); `weights` is the pairwise source.
pub struct EstimatorCtx<'a> {
    pub values: &'a [f64],
    pub weighted_baseline: Option<DiffValue>,
    pub weights: Option<&'a WeightsNode>,
    pub gamma: f64,
    pub lambda: f64,
}

/// Per-trajectory output: advantages as a T x 1 tape value, plus the weighted
/// returns when the estimator maintains a weighted-return baseline.
pub struct Estimate {
    pub advantages: DiffValue,
    pub weighted_returns: Option<DiffValue>,
}

/// An advantage estimation strategy. Implementations are stateless; all
/// run-specific inputs arrive through the context.
pub trait AdvantageEstimator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the estimator reads a pairwise weight source.
    fn needs_weights(&self) -> bool {
        false
    }

    /// Whether the estimator trains the weighted-return baseline psi.
    fn needs_weighted_baseline(&self) -> bool {
        false
    }

    fn estimate(&self, tape: &mut Tape, traj: &Trajectory, ctx: &EstimatorCtx) -> Result<Estimate>;
}

/// Monte-Carlo advantages; constant with respect to the tape.
pub struct McEstimator;

impl AdvantageEstimator for McEstimator {
    fn name(&self) -> &'static str {
        "mc"
    }

    fn estimate(&self, tape: &mut Tape, traj: &Trajectory, ctx: &EstimatorCtx) -> Result<Estimate> {
        let adv = mc_advantages(traj, ctx.values, ctx.gamma);
        Ok(Estimate { advantages: tape.constant_col(&adv)?, weighted_returns: None })
    }
}

/// Lambda estimator; constant with respect to the tape.
pub struct LambdaEstimator;

impl AdvantageEstimator for LambdaEstimator {
    fn name(&self) -> &'static str {
        "lambda"
    }

    fn estimate(&self, tape: &mut Tape, traj: &Trajectory, ctx: &EstimatorCtx) -> Result<Estimate> {
        let adv = lambda_advantages(traj, ctx.values, ctx.gamma, ctx.lambda)?;
        Ok(Estimate { advantages: tape.constant_col(&adv)?, weighted_returns: None })
    }
}

/// Pairwise-weighted TD errors. Needs a weight source but no extra baseline:
/// the TD errors already carry the regular value function.
pub struct PwtdEstimator;

impl AdvantageEstimator for PwtdEstimator {
    fn name(&self) -> &'static str {
        "pwtd"
    }

    fn needs_weights(&self) -> bool {
        true
    }

    fn estimate(&self, tape: &mut Tape, traj: &Trajectory, ctx: &EstimatorCtx) -> Result<Estimate> {
        let weights = ctx
            .weights
            .ok_or_else(|| CoreError::Estimator("pwtd requires a weight source".into()))?;
        let adv = pwtd_advantages(tape, traj, ctx.values, weights, ctx.gamma)?;
        Ok(Estimate { advantages: adv, weighted_returns: None })
    }
}

/// Pairwise-weighted rewards with the matched weighted-return baseline.
pub struct PwrEstimator;

impl AdvantageEstimator for PwrEstimator {
    fn name(&self) -> &'static str {
        "pwr"
    }

    fn needs_weights(&self) -> bool {
        true
    }

    fn needs_weighted_baseline(&self) -> bool {
        true
    }

    fn estimate(&self, tape: &mut Tape, traj: &Trajectory, ctx: &EstimatorCtx) -> Result<Estimate> {
        let weights = ctx
            .weights
            .ok_or_else(|| CoreError::Estimator("pwr requires a weight source".into()))?;
        let baseline = ctx
            .weighted_baseline
            .ok_or_else(|| CoreError::Estimator("pwr requires a weighted-return baseline".into()))?;
        let (returns, adv) =
            pwr_return_and_advantages(tape, traj, baseline, weights, ctx.gamma)?;
        Ok(Estimate { advantages: adv, weighted_returns: Some(returns) })
    }
}

type EstimatorFactory = fn() -> &'static dyn AdvantageEstimator;

static ESTIMATORS: &[(&str, EstimatorFactory)] = &[
    ("mc", || &McEstimator),
    ("lambda", || &LambdaEstimator),
    ("pwtd", || &PwtdEstimator),
    ("pwr", || &PwrEstimator),
];

pub fn estimator_names() -> Vec<&'static str> {
    ESTIMATORS.iter().map(|(n, _)| *n).collect()
}

/// Look up an estimator by its registered name.
pub fn find_estimator(name: &str) -> Result<&'static dyn AdvantageEstimator> {
    ESTIMATORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| f())
        .ok_or_else(|| {
            CoreError::Estimator(format!(
                "unknown estimator '{name}' (known: {})",
                estimator_names().join(", ")
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Mat;

    fn toy_trajectory() -> Trajectory {
        Trajectory::new(
            vec![0, 1, 2, 3],
            vec![0, 0, 0],
            vec![1.0, -1.0, 2.0],
            vec![0.0, 0.0, 0.0],
        )
    }

    #[test]
    fn mc_suffix_sums() {
        let traj = toy_trajectory();
        let adv = mc_advantages(&traj, &[0.0; 4], 1.0);
        assert_eq!(adv, vec![2.0, 1.0, 2.0]);
    }

    #[test]
    fn mc_single_transition() {
        let traj = Trajectory::new(vec![0, 1], vec![0], vec![1.0], vec![0.0]);
        assert_eq!(mc_advantages(&traj, &[0.0, 0.0], 1.0), vec![1.0]);
    }

    #[test]
    fn lambda_zero_is_one_step_td() {
        let traj = toy_trajectory();
        let values = [0.5, 0.2, -0.1, 0.0];
        let delta = td_errors(&traj, &values, 1.0);
        let adv = lambda_advantages(&traj, &values, 1.0, 0.0).unwrap();
        assert_eq!(adv, delta);
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        let traj = toy_trajectory();
        assert!(lambda_advantages(&traj, &[0.0; 4], 1.0, 1.5).is_err());
        assert!(lambda_advantages(&traj, &[0.0; 4], 1.0, -0.1).is_err());
    }

    #[test]
    fn lambda_half_matches_scripted_oracle() {
        // Direct evaluation of the double sum, written independently of the
        // recursive implementation.
        let traj = toy_trajectory();
        let values = [0.5, 0.2, -0.1, 0.0];
        let gamma = 1.0;
        let lambda = 0.5;
        let delta = td_errors(&traj, &values, gamma);
        let mut expected = vec![0.0; 3];
        for t in 0..3 {
            for tp in t + 1..=3 {
                expected[t] += (gamma * lambda).powi(tp as i32 - t as i32 - 1) * delta[tp - 1];
            }
        }
        // delta_1 = 1 + 0.2 - 0.5, delta_2 = -1 - 0.1 - 0.2, delta_3 = 2 + 0.1
        assert!((delta[0] - 0.7).abs() < 1e-15);
        assert!((delta[1] + 1.3).abs() < 1e-15);
        assert!((delta[2] - 2.1).abs() < 1e-15);
        // Frozen oracle outputs.
        assert!((expected[0] - 0.575).abs() < 1e-15);
        assert!((expected[1] + 0.25).abs() < 1e-15);
        assert!((expected[2] - 2.1).abs() < 1e-15);
        let adv = lambda_advantages(&traj, &values, gamma, lambda).unwrap();
        for (a, e) in adv.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_one_recovers_mc() {
        let traj = toy_trajectory();
        let values = [0.4, -0.3, 0.9, 0.2];
        let mc = mc_advantages(&traj, &values, 0.9);
        let lam = lambda_advantages(&traj, &values, 0.9, 1.0).unwrap();
        for (a, b) in mc.iter().zip(&lam) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pwtd_with_exponential_weights_recovers_lambda() {
        let traj = toy_trajectory();
        let values = [0.5, 0.2, -0.1, 0.0];
        let mut tape = Tape::new();
        let adv = pwtd_advantages(
            &mut tape,
            &traj,
            &values,
            &WeightsNode::Exponential { lambda: 0.5 },
            1.0,
        )
        .unwrap();
        let want = lambda_advantages(&traj, &values, 1.0, 0.5).unwrap();
        for (a, e) in tape.value(adv).as_slice().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn pwtd_with_zero_weights_is_zero() {
        let traj = toy_trajectory();
        let mut tape = Tape::new();
        let w = tape.constant(Mat::zeros(4, 4)).unwrap();
        let adv =
            pwtd_advantages(&mut tape, &traj, &[0.3; 4], &WeightsNode::Table(w), 1.0).unwrap();
        assert!(tape.value(adv).as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pwr_with_discount_weights_recovers_mc() {
        let traj = toy_trajectory();
        let gamma = 0.9;
        let values = [0.5, 0.2, -0.1, 0.0];
        let mut tape = Tape::new();
        let baseline = tape.constant(Mat::col(&values)).unwrap();
        let (returns, adv) = pwr_return_and_advantages(
            &mut tape,
            &traj,
            baseline,
            &WeightsNode::Discount,
            gamma,
        )
        .unwrap();
        let g = traj.returns(gamma);
        let mc = mc_advantages(&traj, &values, gamma);
        for ((r, a), (gt, m)) in tape
            .value(returns)
            .as_slice()
            .iter()
            .zip(tape.value(adv).as_slice())
            .zip(g.iter().zip(&mc))
        {
            assert!((r - gt).abs() < 1e-12);
            assert!((a - m).abs() < 1e-12);
        }
    }

    #[test]
    fn pwr_zero_rewards_gives_negated_baseline() {
        let traj = Trajectory::new(vec![0, 1, 2], vec![0, 0], vec![0.0, 0.0], vec![0.0, 0.0]);
        let mut tape = Tape::new();
        let baseline = tape.constant(Mat::col(&[0.7, -0.2, 0.0])).unwrap();
        let w = tape.constant(Mat::full(3, 3, 0.5)).unwrap();
        let (returns, adv) =
            pwr_return_and_advantages(&mut tape, &traj, baseline, &WeightsNode::Table(w), 1.0)
                .unwrap();
        assert!(tape.value(returns).as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(tape.value(adv).as_slice(), &[-0.7, 0.2]);
    }

    #[test]
    fn pwr_gradient_wrt_eta_matches_sigmoid_slope() {
        // d(adv_0)/d(eta[s0][s2]) = delta-free case: reward at t'=2 times
        // sigmoid'(eta) for the (s0, s2) entry.
        let traj = Trajectory::new(vec![0, 1, 2], vec![0, 0], vec![0.0, 3.0], vec![0.0, 0.0]);
        let mut tape = Tape::new();
        let eta = tape.param(Mat::full(3, 3, 0.3)).unwrap();
        let w = tape.sigmoid(eta).unwrap();
        let baseline = tape.constant(Mat::zeros(3, 1)).unwrap();
        let (_, adv) =
            pwr_return_and_advantages(&mut tape, &traj, baseline, &WeightsNode::Table(w), 1.0)
                .unwrap();
        let first = tape.slice_rows(adv, 0, 1).unwrap();
        let obj = tape.sum(first).unwrap();
        let g = tape.grad_nodes(obj, &[eta]).unwrap()[0].unwrap();
        let gmat = tape.value(g).clone();
        let sig = 1.0 / (1.0 + (-0.3f64).exp());
        let expected = 3.0 * sig * (1.0 - sig);
        assert!((gmat[(0, 2)] - expected).abs() < 1e-12, "{}", gmat[(0, 2)]);
        // The (s0, s1) entry multiplies a zero reward.
        assert_eq!(gmat[(0, 1)], 0.0);
    }

    #[test]
    fn registry_knows_all_names() {
        assert_eq!(estimator_names(), vec!["mc", "lambda", "pwtd", "pwr"]);
        assert!(find_estimator("pwr").is_ok());
        assert!(find_estimator("nope").is_err());
    }

    #[test]
    fn td_errors_with_zeroed_values_are_the_raw_rewards() {
        let traj = toy_trajectory();
        assert_eq!(td_errors(&traj, &[0.0; 4], 1.0), traj.rewards);
    }

    #[test]
    fn pwtd_gradient_is_td_error_times_sigmoid_slope() {
        // d(adv_0)/d(eta[s0][s2]) = delta_2 * sigmoid'(eta[s0][s2]).
        let traj = toy_trajectory();
        let values = [0.5, 0.2, -0.1, 0.0];
        let delta = td_errors(&traj, &values, 1.0);
        let mut tape = Tape::new();
        let eta = tape.param(Mat::full(4, 4, -0.4)).unwrap();
        let w = tape.sigmoid(eta).unwrap();
        let adv =
            pwtd_advantages(&mut tape, &traj, &values, &WeightsNode::Table(w), 1.0).unwrap();
        let first = tape.slice_rows(adv, 0, 1).unwrap();
        let obj = tape.sum(first).unwrap();
        let g = tape.grad_nodes(obj, &[eta]).unwrap()[0].unwrap();
        let gmat = tape.value(g).clone();
        let sig = 1.0 / (1.0 + 0.4f64.exp());
        // Entering state 2 happens at t' = 2, whose TD error is delta[1].
        let expected = delta[1] * sig * (1.0 - sig);
        assert!((gmat[(0, 2)] - expected).abs() < 1e-15, "{} vs {expected}", gmat[(0, 2)]);
    }

    #[test]
    fn umbrella_oracle_weights_keep_only_the_final_reward() {
        let env = crate::envs::umbrella_make(6, 0.3, 1.5, 0).unwrap();
        let hw = crate::credit::handcrafted_umbrella(&env);
        // A chain trajectory with arbitrary noisy rewards.
        let states: Vec<usize> = (0..=6).collect();
        let rewards = vec![0.7, -1.2, 0.4, 2.2, -0.6, 1.0];
        let traj = Trajectory::new(states, vec![0; 6], rewards.clone(), vec![0.0; 6]);
        let mut tape = Tape::new();
        let w = tape.constant(hw.weights().clone()).unwrap();
        let baseline = tape.constant(Mat::zeros(7, 1)).unwrap();
        let (returns, _) =
            pwr_return_and_advantages(&mut tape, &traj, baseline, &WeightsNode::Table(w), 1.0)
                .unwrap();
        let r = tape.value(returns);
        assert_eq!(r[(0, 0)], *rewards.last().unwrap());
        for t in 1..6 {
            assert_eq!(r[(t, 0)], 0.0);
        }
    }
}
