//! Online-mode meta training.
//!
//! Each outer step: update the policy on the carried trajectory batch with
//! the weighted advantages, sample a fresh batch from the updated policy,
//! ascend the weight table on the outer objective evaluated there, fit phi,
//! and carry the fresh batch over as the next step's training data — so
//! after the first step exactly one new batch is collected per outer step.

use std::sync::Arc;

use crate::agent::{
    action_counts, inner_update_on_batch, sample_batch, Direction, HostOptim, InnerConfig,
    InnerStepCtx, PersistentMoments, RegularCritic, TabularActorCritic, TapedAgent, Trajectory,
};
use crate::credit::{AdvantageEstimator, PairwiseWeightTable, WeightsNode};
use crate::diffmath::{Mat, Tape};
use crate::envs::EpisodicMdp;
use crate::rng::{names, Streams};
use crate::{CoreError, Result};

use super::{clip_by_global_norm, outer_objective, MetaConfig, OuterObjectiveRecord};

/// State carried across online outer steps: host copies of the inner
/// parameters and optimizer moments, the phi critic, the outer optimizer,
/// and the reused trajectory batch.
pub struct OnlineLoop {
    theta: Mat,
    psi: Vec<f64>,
    theta_moments: PersistentMoments,
    psi_moments: PersistentMoments,
    phi: RegularCritic,
    outer_opt: HostOptim,
    counts: Arc<Vec<usize>>,
    carried: Option<Vec<Trajectory>>,
    episodes_seen: u64,
    steps: usize,
}

impl OnlineLoop {
    pub fn new(
        env: &dyn EpisodicMdp,
        inner_cfg: &InnerConfig,
        meta_cfg: &MetaConfig,
        streams: &Streams,
    ) -> Result<Self> {
        meta_cfg.validate()?;
        let n = env.num_states();
        let a = env.max_actions();
        let mut init_rng = streams.stream(names::INIT, 0);
        let ac = TabularActorCritic::random_init(n, a, &mut init_rng);
        Ok(OnlineLoop {
            theta: ac.theta,
            psi: ac.psi,
            theta_moments: PersistentMoments::zeros(n, a),
            psi_moments: PersistentMoments::zeros(n, 1),
            phi: RegularCritic::learned(ac.phi, inner_cfg.optim),
            outer_opt: HostOptim::new(meta_cfg.outer_optim, n * n),
            counts: action_counts(env),
            carried: None,
            episodes_seen: 0,
            steps: 0,
        })
    }

    pub fn episodes_seen(&self) -> u64 {
        self.episodes_seen
    }

    pub fn snapshot(&self) -> TabularActorCritic {
        TabularActorCritic {
            theta: self.theta.clone(),
            psi: self.psi.clone(),
            phi: self.phi.values().to_vec(),
        }
    }

    /// One online meta step. Returns the step record and the returns of the
    /// freshly sampled episodes (the carried batch was already reported by
    /// the step that sampled it).
    pub fn step(
        &mut self,
        env: &dyn EpisodicMdp,
        estimator: &dyn AdvantageEstimator,
        weights: &mut PairwiseWeightTable,
        inner_cfg: &InnerConfig,
        meta_cfg: &MetaConfig,
        streams: &Streams,
    ) -> Result<(OuterObjectiveRecord, Vec<f64>)> {
        if weights.num_states() != env.num_states() {
            return Err(CoreError::Invalid(format!(
                "weight table is {0}x{0} but the environment has {1} states",
                weights.num_states(),
                env.num_states()
            )));
        }
        let mut tape = Tape::new();
        let (eta_node, w_node) = weights.tape_weights(&mut tape)?;

        let mut fresh_returns = Vec::new();
        let tau = match self.carried.take() {
            Some(batch) => batch,
            None => {
                let batch = sample_batch(
                    &self.theta,
                    env,
                    &self.counts,
                    inner_cfg.batch_size,
                    streams,
                    self.episodes_seen,
                );
                self.episodes_seen += batch.len() as u64;
                fresh_returns.extend(batch.iter().map(|t| t.total_return()));
                batch
            }
        };

        // (1) Update theta (and psi) on tau with the weighted advantages.
        let theta = tape.constant(self.theta.clone())?;
        let opt_theta = self.theta_moments.register(&mut tape, inner_cfg.optim)?;
        let (psi, opt_psi) = if estimator.needs_weighted_baseline() {
            let psi = tape.constant(Mat::col(&self.psi))?;
            let opt = self.psi_moments.register(&mut tape, inner_cfg.optim)?;
            (Some(psi), Some(opt))
        } else {
            (None, None)
        };
        let mut agent = TapedAgent { theta, psi, opt_theta, opt_psi };
        let ctx = InnerStepCtx {
            env,
            counts: &self.counts,
            estimator,
            weights: Some(WeightsNode::Table(w_node)),
            cfg: inner_cfg,
            streams: *streams,
        };
        inner_update_on_batch(&mut tape, &mut agent, self.phi.values(), &ctx, &tau)?;

        // (2) Sample tau' from the updated policy.
        let theta_prime_mat = tape.value(agent.theta).clone();
        let tau_prime = sample_batch(
            &theta_prime_mat,
            env,
            &self.counts,
            inner_cfg.batch_size,
            streams,
            self.episodes_seen,
        );
        self.episodes_seen += tau_prime.len() as u64;
        fresh_returns.extend(tau_prime.iter().map(|t| t.total_return()));

        // (3) Outer objective on tau' at theta'; clipped ascent on eta.
        let objective = outer_objective(
            &mut tape,
            &tau_prime,
            agent.theta,
            &self.counts,
            self.phi.values(),
            inner_cfg.gamma,
            meta_cfg.outer_lambda,
        )?;
        let objective_value = tape.value(objective).scalar_value();
        let mut grad = match tape.grad_nodes(objective, &[eta_node])?[0] {
            Some(g) => tape.value(g).clone(),
            None => Mat::zeros(eta_node.rows(), eta_node.cols()),
        };
        let (pre, post) = clip_by_global_norm(&mut grad, meta_cfg.clip_norm);
        self.outer_opt.apply(weights.eta_mut().as_mut_slice(), grad.as_slice(), Direction::Ascent);
        if !weights.eta().is_all_finite() {
            return Err(CoreError::NonFinite { context: "weight table after outer update".into() });
        }

        // (4) Fit phi on the fresh data's regular returns.
        self.phi.fit(&tau_prime, inner_cfg.gamma);

        // (5) Persist the updated inner parameters; tau' becomes the next tau.
        self.theta = theta_prime_mat;
        self.theta_moments.absorb(&tape, &agent.opt_theta);
        if let (Some(psi), Some(opt)) = (agent.psi, agent.opt_psi.as_ref()) {
            self.psi = tape.value(psi).as_slice().to_vec();
            self.psi_moments.absorb(&tape, opt);
        }
        self.carried = Some(tau_prime);
        self.steps += 1;

        Ok((
            OuterObjectiveRecord {
                outer_step: self.steps - 1,
                objective: objective_value,
                grad_norm_pre_clip: pre,
                grad_norm_post_clip: post,
                snapshot: None,
            },
            fresh_returns,
        ))
    }

    /// The batch that will train the next step's policy update (the reuse).
    pub fn carried_batch(&self) -> Option<&[Trajectory]> {
        self.carried.as_deref()
    }
}
