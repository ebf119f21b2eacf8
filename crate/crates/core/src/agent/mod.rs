//! Tabular softmax actor-critic.
//!
//! The policy is a logits matrix over (state, action); states with fewer
//! valid actions are masked, and masked logits never receive gradient. The
//! two baselines are value tables: psi predicts the pairwise-weighted return
//! (trained on the tape so meta-gradients flow through its targets), phi the
//! regular return (trained on host floats, outside any tape).

mod inner;
mod optimizer;
mod trajectory;

pub use inner::{
    inner_step, inner_update_on_batch, InnerConfig, InnerStepCtx, PlainTrainer, RegularCritic,
    TapedAgent,
};
pub use optimizer::{Direction, HostOptim, OptimConfig, OptimKind, PersistentMoments, TapedOptim};
pub use trajectory::Trajectory;

use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::diffmath::{DiffValue, Mat, Tape};
use crate::envs::EpisodicMdp;
use crate::rng::{names, Streams};
use crate::{CoreError, Result};

/// Host copies of the learnable tables: policy logits theta, weighted-return
/// baseline psi, regular-return baseline phi.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularActorCritic {
    pub theta: Mat,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
}

impl TabularActorCritic {
    pub fn zeros(num_states: usize, max_actions: usize) -> Self {
        TabularActorCritic {
            theta: Mat::zeros(num_states, max_actions),
            psi: vec![0.0; num_states],
            phi: vec![0.0; num_states],
        }
    }

    /// All three tables drawn from Uniform[-0.01, 0.01].
    pub fn random_init(num_states: usize, max_actions: usize, rng: &mut dyn RngCore) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-0.01..=0.01)).collect::<Vec<f64>>();
        TabularActorCritic {
            theta: Mat::from_vec(num_states, max_actions, draw(num_states * max_actions)),
            psi: draw(num_states),
            phi: draw(num_states),
        }
    }
}

/// Per-state valid action counts, shared with the masked tape ops.
pub fn action_counts(env: &dyn EpisodicMdp) -> Arc<Vec<usize>> {
    Arc::new((0..env.num_states()).map(|s| env.actions_at(s)).collect())
}

/// Policy probabilities over the valid actions of `state`.
pub fn policy_probs(theta: &Mat, state: usize, count: usize) -> Vec<f64> {
    let row = &theta.row(state)[..count];
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn sample_action(
    theta: &Mat,
    state: usize,
    count: usize,
    rng: &mut dyn RngCore,
) -> (usize, f64) {
    if count == 1 {
        return (0, 0.0);
    }
    let probs = policy_probs(theta, state, count);
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return (a, p.ln());
        }
    }
    (count - 1, probs[count - 1].ln())
}

/// Roll out one episode under the softmax policy of `theta`.
pub fn sample_episode(
    theta: &Mat,
    env: &dyn EpisodicMdp,
    counts: &[usize],
    env_rng: &mut dyn RngCore,
    act_rng: &mut dyn RngCore,
) -> Trajectory {
    let mut ep = env.reset(env_rng);
    let mut states = vec![ep.state];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut log_probs = Vec::new();
    loop {
        let (action, logp) = sample_action(theta, ep.state, counts[ep.state], act_rng);
        let step = env.step(&mut ep, action, env_rng);
        actions.push(action);
        rewards.push(step.reward);
        log_probs.push(logp);
        states.push(step.next_state);
        if step.done {
            break;
        }
        assert!(
            actions.len() <= env.episode_length_bound(),
            "episode exceeded its length bound"
        );
    }
    Trajectory::new(states, actions, rewards, log_probs)
}

/// Sample a batch of full episodes. Episode k of the batch draws its
/// environment and action randomness from streams indexed by
/// `episode_base + k`, so runs that share a master seed see identical
/// environment noise per episode index regardless of method.
pub fn sample_batch(
    theta: &Mat,
    env: &dyn EpisodicMdp,
    counts: &[usize],
    batch_size: usize,
    streams: &Streams,
    episode_base: u64,
) -> Vec<Trajectory> {
    (0..batch_size)
        .map(|k| {
            let idx = episode_base + k as u64;
            let mut env_rng = streams.stream(names::ENV, idx);
            let mut act_rng = streams.stream(names::ACT, idx);
            sample_episode(theta, env, counts, &mut env_rng, &mut act_rng)
        })
        .collect()
}

/// The inner policy objective (maximized): mean over trajectories of the
/// advantage-weighted log-likelihood, plus entropy regularization averaged
/// over visited states. Advantages enter as tape values so their gradient
/// (if any) flows to the weight table; the log-probability terms carry the
/// theta gradient.
pub fn inner_policy_objective(
    tape: &mut Tape,
    theta: DiffValue,
    counts: &Arc<Vec<usize>>,
    batch: &[Trajectory],
    advantages: &[DiffValue],
    entropy_coef: f64,
    standardize: bool,
) -> Result<DiffValue> {
    if batch.is_empty() {
        return Err(CoreError::Invalid("empty batch".into()));
    }
    if advantages.len() != batch.len() {
        return Err(CoreError::Invalid(format!(
            "{} advantage vectors for {} trajectories",
            advantages.len(),
            batch.len()
        )));
    }
    for (adv, traj) in advantages.iter().zip(batch) {
        if adv.rows() != traj.len() || adv.cols() != 1 {
            return Err(CoreError::Invalid(format!(
                "advantage shape {:?} for a trajectory of length {}",
                adv.shape(),
                traj.len()
            )));
        }
    }

    let mut adv = tape.concat_rows(advantages)?;
    if standardize {
        adv = standardize_column(tape, adv)?;
    }

    let step_pairs: Arc<Vec<(usize, usize)>> = Arc::new(
        batch
            .iter()
            .flat_map(|traj| traj.states[..traj.len()].iter().copied().zip(traj.actions.iter().copied()))
            .collect(),
    );
    let logp_table = tape.log_softmax_rows_masked(theta, counts)?;
    let logp = tape.gather(logp_table, &step_pairs)?;
    let weighted = tape.dot(logp, adv)?;
    let pg = tape.mul_scalar(weighted, 1.0 / batch.len() as f64)?;

    if entropy_coef == 0.0 {
        return Ok(pg);
    }
    let state_pairs: Arc<Vec<(usize, usize)>> =
        Arc::new(step_pairs.iter().map(|&(s, _)| (s, 0)).collect());
    let entropy_table = tape.entropy_rows_masked(theta, counts)?;
    let visited = tape.gather(entropy_table, &state_pairs)?;
    let mean_entropy = tape.mean(visited)?;
    let scaled = tape.mul_scalar(mean_entropy, entropy_coef)?;
    Ok(tape.add(pg, scaled)?)
}

fn standardize_column(tape: &mut Tape, v: DiffValue) -> Result<DiffValue> {
    let n = v.rows();
    let mean = tape.mean(v)?;
    let mean_b = tape.broadcast_scalar(mean, n, 1)?;
    let centered = tape.sub(v, mean_b)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq)?;
    let var_eps = tape.add_scalar(var, 1e-8)?;
    let std = tape.sqrt(var_eps)?;
    let std_b = tape.broadcast_scalar(std, n, 1)?;
    Ok(tape.div(centered, std_b)?)
}

/// Half mean-squared error between a value table and per-step targets
/// (minimized). Targets may be tape values (weighted returns) or constants.
pub fn value_loss(
    tape: &mut Tape,
    values: DiffValue,
    batch: &[Trajectory],
    targets: &[DiffValue],
) -> Result<DiffValue> {
    if targets.len() != batch.len() {
        return Err(CoreError::Invalid(format!(
            "{} target vectors for {} trajectories",
            targets.len(),
            batch.len()
        )));
    }
    for (t, traj) in targets.iter().zip(batch) {
        if t.rows() != traj.len() || t.cols() != 1 {
            return Err(CoreError::Invalid(format!(
                "target shape {:?} for a trajectory of length {}",
                t.shape(),
                traj.len()
            )));
        }
    }
    let state_pairs: Arc<Vec<(usize, usize)>> = Arc::new(
        batch
            .iter()
            .flat_map(|traj| traj.states[..traj.len()].iter().map(|&s| (s, 0)))
            .collect(),
    );
    let n = state_pairs.len();
    let target = tape.concat_rows(targets)?;
    let predicted = tape.gather(values, &state_pairs)?;
    let err = tape.sub(target, predicted)?;
    let sq = tape.square(err)?;
    let total = tape.sum(sq)?;
    Ok(tape.mul_scalar(total, 0.5 / n as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::dag_make;

    #[test]
    fn greedy_policy_on_deterministic_env_repeats_trajectories() {
        let env = dag_make(3, 1, 0).unwrap();
        let counts = action_counts(&env);
        // Strongly peaked logits: effectively deterministic.
        let mut theta = Mat::zeros(env.num_states(), 2);
        for s in 0..env.num_states() {
            theta[(s, 0)] = 50.0;
            theta[(s, 1)] = -50.0;
        }
        let streams = Streams::new(5);
        let batch = sample_batch(&theta, &env, &counts, 4, &streams, 0);
        for traj in &batch[1..] {
            assert_eq!(traj.states, batch[0].states);
            assert_eq!(traj.actions, batch[0].actions);
            assert_eq!(traj.rewards, batch[0].rewards);
        }
    }

    #[test]
    fn uniform_policy_visits_both_actions_evenly() {
        let env = dag_make(3, 1, 0).unwrap();
        let counts = action_counts(&env);
        let theta = Mat::zeros(env.num_states(), 2);
        let streams = Streams::new(6);
        let mut ones = 0usize;
        let n = 10_000;
        let batch = sample_batch(&theta, &env, &counts, n, &streams, 0);
        for traj in &batch {
            ones += traj.actions[0];
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn environment_streams_are_paired_across_policies() {
        // Episode k draws its environment randomness from stream (env, k)
        // regardless of the policy, so two different policies see identical
        // reward noise at the same episode index. On the umbrella chain the
        // state path is fixed, which makes this directly observable.
        let env = crate::envs::umbrella_make(10, 0.0, 2.0, 0).unwrap();
        let counts = action_counts(&env);
        let streams = Streams::new(14);
        let uniform = Mat::zeros(env.num_states(), env.max_actions());
        let mut skewed = Mat::zeros(env.num_states(), env.max_actions());
        skewed[(0, 1)] = 3.0;
        let a = sample_batch(&uniform, &env, &counts, 16, &streams, 0);
        let b = sample_batch(&skewed, &env, &counts, 16, &streams, 0);
        for (ta, tb) in a.iter().zip(&b) {
            // All noisy rewards agree; only the action-dependent final
            // reward may differ.
            assert_eq!(ta.rewards[..ta.len() - 1], tb.rewards[..tb.len() - 1]);
        }
    }

    #[test]
    fn sampling_is_reproducible_per_seed() {
        let env = dag_make(4, 2, 0).unwrap();
        let counts = action_counts(&env);
        let theta = Mat::zeros(env.num_states(), 2);
        let streams = Streams::new(9);
        let a = sample_batch(&theta, &env, &counts, 8, &streams, 16);
        let b = sample_batch(&theta, &env, &counts, 8, &streams, 16);
        assert_eq!(a, b);
    }

    #[test]
    fn log_probs_match_policy() {
        let env = dag_make(2, 3, 0).unwrap();
        let counts = action_counts(&env);
        let mut theta = Mat::zeros(env.num_states(), 2);
        theta[(0, 0)] = 1.0;
        let streams = Streams::new(3);
        let batch = sample_batch(&theta, &env, &counts, 32, &streams, 0);
        for traj in &batch {
            for (t, &s) in traj.states[..traj.len()].iter().enumerate() {
                let probs = policy_probs(&theta, s, counts[s]);
                let expected = probs[traj.actions[t]].ln();
                assert!((traj.log_probs[t] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_advantages_zero_entropy_gives_zero_objective_and_gradient() {
        let env = dag_make(2, 0, 0).unwrap();
        let counts = action_counts(&env);
        let mut tape = Tape::new();
        let theta = tape.param(Mat::zeros(env.num_states(), 2)).unwrap();
        let streams = Streams::new(1);
        let theta_mat = Mat::zeros(env.num_states(), 2);
        let batch = sample_batch(&theta_mat, &env, &counts, 2, &streams, 0);
        let advantages: Vec<_> = batch
            .iter()
            .map(|t| tape.constant(Mat::zeros(t.len(), 1)).unwrap())
            .collect();
        let obj =
            inner_policy_objective(&mut tape, theta, &counts, &batch, &advantages, 0.0, false)
                .unwrap();
        assert_eq!(tape.value(obj).scalar_value(), 0.0);
        let g = tape.grad_nodes(obj, &[theta]).unwrap()[0];
        let gmat = tape.value(g.unwrap());
        assert!(gmat.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn positive_advantage_increases_chosen_action_probability() {
        // Single decision state, positive advantage on action 0: one ascent
        // step must raise pi(a0 | s).
        let env = dag_make(1, 0, 0).unwrap();
        let counts = action_counts(&env);
        let streams = Streams::new(2);
        let theta_mat = Mat::zeros(env.num_states(), 2);
        let mut batch = sample_batch(&theta_mat, &env, &counts, 1, &streams, 0);
        batch[0].actions[0] = 0;
        let mut tape = Tape::new();
        let theta = tape.param(theta_mat.clone()).unwrap();
        let adv = vec![tape.constant(Mat::col(&[1.0])).unwrap()];
        let obj =
            inner_policy_objective(&mut tape, theta, &counts, &batch, &adv, 0.0, false).unwrap();
        let g = tape.grad_nodes(obj, &[theta]).unwrap()[0].unwrap();
        let mut opt = TapedOptim::fresh(&mut tape, OptimConfig::sgd(0.5), theta.rows(), theta.cols()).unwrap();
        let theta2 = opt.apply(&mut tape, theta, g, Direction::Ascent).unwrap();
        let updated = tape.value(theta2).clone();
        let before = policy_probs(&theta_mat, 0, 2)[0];
        let after = policy_probs(&updated, 0, 2)[0];
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn misaligned_advantages_rejected() {
        let env = dag_make(2, 0, 0).unwrap();
        let counts = action_counts(&env);
        let streams = Streams::new(1);
        let theta_mat = Mat::zeros(env.num_states(), 2);
        let batch = sample_batch(&theta_mat, &env, &counts, 2, &streams, 0);
        let mut tape = Tape::new();
        let theta = tape.param(theta_mat).unwrap();
        let bad = vec![tape.constant(Mat::col(&[0.0])).unwrap()];
        assert!(inner_policy_objective(&mut tape, theta, &counts, &batch, &bad, 0.0, false)
            .is_err());
    }

    #[test]
    fn value_loss_zero_at_targets() {
        let env = dag_make(2, 0, 0).unwrap();
        let counts = action_counts(&env);
        let streams = Streams::new(4);
        let theta_mat = Mat::zeros(env.num_states(), 2);
        let batch = sample_batch(&theta_mat, &env, &counts, 2, &streams, 0);
        let mut tape = Tape::new();
        let table: Vec<f64> = (0..env.num_states()).map(|s| s as f64 * 0.1).collect();
        let values = tape.param(Mat::col(&table)).unwrap();
        let targets: Vec<_> = batch
            .iter()
            .map(|traj| {
                let t: Vec<f64> =
                    traj.states[..traj.len()].iter().map(|&s| table[s]).collect();
                tape.constant(Mat::col(&t)).unwrap()
            })
            .collect();
        let loss = value_loss(&mut tape, values, &batch, &targets).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);
        let g = tape.grad_nodes(loss, &[values]).unwrap()[0].unwrap();
        assert!(tape.value(g).as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn value_loss_single_target_quadratic() {
        // One visited state, value 0, target g: loss = g^2 / 2, gradient -g.
        let traj = Trajectory::new(vec![0, 1], vec![0], vec![0.0], vec![0.0]);
        let mut tape = Tape::new();
        let values = tape.param(Mat::col(&[0.0, 0.0])).unwrap();
        let g = 3.0;
        let targets = vec![tape.constant(Mat::col(&[g])).unwrap()];
        let loss = value_loss(&mut tape, values, &[traj], &targets).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.5 * g * g);
        let grad = tape.grad_nodes(loss, &[values]).unwrap()[0].unwrap();
        assert_eq!(tape.value(grad)[(0, 0)], -g);
    }
}
