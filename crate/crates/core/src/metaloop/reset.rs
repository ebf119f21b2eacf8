//! Reset-mode meta training.
//!
//! Every outer step re-randomizes the agent and runs K inner updates on one
//! tape, reusing data exactly like the online protocol: the batch sampled
//! from each updated policy both evaluates the outer objective there and
//! trains the next update. The outer objective is the sum of the K terms,
//! and the gradient of the k-th term flows back through all preceding
//! updates (optimizer moments included) to the weight table.

use std::sync::Arc;

use crate::agent::{
    action_counts, inner_update_on_batch, sample_batch, HostOptim, InnerConfig, InnerStepCtx,
    RegularCritic, TabularActorCritic, TapedAgent, TapedOptim, Trajectory,
};
use crate::credit::{AdvantageEstimator, PairwiseWeightTable, WeightsNode};
use crate::diffmath::{DiffValue, Mat, Tape};
use crate::envs::EpisodicMdp;
use crate::rng::{names, Streams};
use crate::{CoreError, Result};

use super::{clip_by_global_norm, outer_objective, MetaConfig, OuterObjectiveRecord};

/// One reset-mode outer update of the weight table. `value_override` pins the
/// regular value table (masked-probe protocol): TD errors and the outer
/// advantages then use the supplied table and phi is not trained.
///
/// The step is a pure function of (weights, streams, outer_step, config); no
/// inner-agent state survives it.
#[allow(clippy::too_many_arguments)]
pub fn reset_meta_step(
    weights: &mut PairwiseWeightTable,
    outer_opt: &mut HostOptim,
    env: &dyn EpisodicMdp,
    estimator: &dyn AdvantageEstimator,
    inner_cfg: &InnerConfig,
    meta_cfg: &MetaConfig,
    streams: &Streams,
    outer_step: usize,
    value_override: Option<&[f64]>,
) -> Result<OuterObjectiveRecord> {
    meta_cfg.validate()?;
    if weights.num_states() != env.num_states() {
        return Err(CoreError::Invalid(format!(
            "weight table is {0}x{0} but the environment has {1} states",
            weights.num_states(),
            env.num_states()
        )));
    }
    if let Some(v) = value_override {
        if v.len() != env.num_states() {
            return Err(CoreError::Invalid(format!(
                "value override has {} entries for {} states",
                v.len(),
                env.num_states()
            )));
        }
    }

    let counts = action_counts(env);
    let child = streams.child("outer", outer_step as u64);
    let mut tape = Tape::new();
    let (eta_node, w_node) = weights.tape_weights(&mut tape)?;

    let mut init_rng = child.stream(names::INIT, 0);
    let ac = TabularActorCritic::random_init(env.num_states(), env.max_actions(), &mut init_rng);
    let mut agent =
        TapedAgent::register_fresh(&mut tape, &ac, estimator.needs_weighted_baseline(), inner_cfg.optim)?;
    let mut phi = match value_override {
        Some(v) => RegularCritic::fixed(v.to_vec()),
        None => RegularCritic::learned(ac.phi.clone(), inner_cfg.optim),
    };

    let ctx = InnerStepCtx {
        env,
        counts: &counts,
        estimator,
        weights: Some(WeightsNode::Table(w_node)),
        cfg: inner_cfg,
        streams: child,
    };

    let mut episode = 0u64;
    let theta0 = tape.value(agent.theta).clone();
    let mut batch =
        sample_batch(&theta0, env, &counts, inner_cfg.batch_size, &child, episode);
    episode += batch.len() as u64;

    let mut objective: Option<DiffValue> = None;
    for _ in 0..meta_cfg.inner_updates_per_outer {
        inner_update_on_batch(&mut tape, &mut agent, phi.values(), &ctx, &batch)?;
        let theta_mat = tape.value(agent.theta).clone();
        let fresh =
            sample_batch(&theta_mat, env, &counts, inner_cfg.batch_size, &child, episode);
        episode += fresh.len() as u64;
        let term = outer_objective(
            &mut tape,
            &fresh,
            agent.theta,
            &counts,
            phi.values(),
            inner_cfg.gamma,
            meta_cfg.outer_lambda,
        )?;
        objective = Some(match objective {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        phi.fit(&fresh, inner_cfg.gamma);
        batch = fresh;
    }
    let objective = objective.expect("K >= 1");
    let objective_value = tape.value(objective).scalar_value();

    let mut grad = match tape.grad_nodes(objective, &[eta_node])?[0] {
        Some(g) => tape.value(g).clone(),
        None => Mat::zeros(eta_node.rows(), eta_node.cols()),
    };
    let (pre, post) = clip_by_global_norm(&mut grad, meta_cfg.clip_norm);
    outer_opt.apply(
        weights.eta_mut().as_mut_slice(),
        grad.as_slice(),
        crate::agent::Direction::Ascent,
    );
    if !weights.eta().is_all_finite() {
        return Err(CoreError::NonFinite { context: "weight table after outer update".into() });
    }

    Ok(OuterObjectiveRecord {
        outer_step,
        objective: objective_value,
        grad_norm_pre_clip: pre,
        grad_norm_post_clip: post,
        snapshot: None,
    })
}

/// The reset-mode objective on pre-sampled, fixed batches: K inner updates
/// from a fixed initialization, where update k consumes `batches[k]` and the
/// outer term after it is evaluated on `batches[k+1]` at the just-updated
/// policy (so `batches` must hold K+1 entries). With trajectories and the
/// regular value table held fixed, this is a smooth function of the weight
/// parameters, which is what the finite-difference metagradient checks
/// differentiate.
#[allow(clippy::too_many_arguments)]
pub fn composed_objective_fixed_batches(
    tape: &mut Tape,
    weights: WeightsNode,
    init: &TabularActorCritic,
    phi_values: &[f64],
    batches: &[Vec<Trajectory>],
    counts: &Arc<Vec<usize>>,
    estimator: &dyn AdvantageEstimator,
    inner_cfg: &InnerConfig,
    outer_lambda: f64,
) -> Result<DiffValue> {
    if batches.len() < 2 {
        return Err(CoreError::Invalid(
            "need K+1 batches: one per update plus one per outer term".into(),
        ));
    }
    let theta = tape.constant(init.theta.clone())?;
    let opt_theta = TapedOptim::fresh(tape, inner_cfg.optim, theta.rows(), theta.cols())?;
    let (psi, opt_psi) = if estimator.needs_weighted_baseline() {
        let psi = tape.constant(Mat::col(&init.psi))?;
        let opt = TapedOptim::fresh(tape, inner_cfg.optim, psi.rows(), 1)?;
        (Some(psi), Some(opt))
    } else {
        (None, None)
    };
    let mut agent = TapedAgent { theta, psi, opt_theta, opt_psi };
    let ctx = InnerStepCtx {
        env: &NullEnv { num_states: phi_values.len() },
        counts,
        estimator,
        weights: Some(weights),
        cfg: inner_cfg,
        streams: Streams::new(0),
    };

    let mut objective: Option<DiffValue> = None;
    for k in 0..batches.len() - 1 {
        inner_update_on_batch(tape, &mut agent, phi_values, &ctx, &batches[k])?;
        let term = outer_objective(
            tape,
            &batches[k + 1],
            agent.theta,
            counts,
            phi_values,
            inner_cfg.gamma,
            outer_lambda,
        )?;
        objective = Some(match objective {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(objective.expect("non-empty"))
}

/// Placeholder environment for fixed-batch evaluation; never stepped.
struct NullEnv {
    num_states: usize,
}

impl EpisodicMdp for NullEnv {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn actions_at(&self, _state: usize) -> usize {
        1
    }

    fn reset(&self, _rng: &mut dyn rand::RngCore) -> crate::envs::EpisodeState {
        unreachable!("fixed-batch evaluation never samples")
    }

    fn step(
        &self,
        _ep: &mut crate::envs::EpisodeState,
        _action: usize,
        _rng: &mut dyn rand::RngCore,
    ) -> crate::envs::Step {
        unreachable!("fixed-batch evaluation never samples")
    }

    fn max_return(&self) -> f64 {
        0.0
    }

    fn episode_length_bound(&self) -> usize {
        0
    }
}
