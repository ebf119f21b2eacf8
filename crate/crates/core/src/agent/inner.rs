//! One inner-loop update, recorded on a tape.
//!
//! The same routine drives plain training (fresh tape per update, parameters
//! persisted on the host), online meta steps (one tape per outer step), and
//! reset training (one tape across all K inner updates, so the outer
//! objective can be backpropagated through every preceding update).

use std::sync::Arc;

use rand::RngCore;

use crate::credit::{AdvantageEstimator, EstimatorCtx, WeightsNode};
use crate::diffmath::{DiffValue, Mat, Tape};
use crate::envs::EpisodicMdp;
use crate::rng::Streams;
use crate::{CoreError, Result};

use super::optimizer::{Direction, HostOptim, OptimConfig, PersistentMoments, TapedOptim};
use super::trajectory::Trajectory;
use super::{
    action_counts, inner_policy_objective, sample_batch, value_loss, TabularActorCritic,
};

/// Inner-loop hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerConfig {
    pub gamma: f64,
    /// Decay of the lambda estimator (ignored by the others).
    pub lambda: f64,
    pub entropy_coef: f64,
    pub batch_size: usize,
    pub standardize_advantages: bool,
    pub optim: OptimConfig,
}

impl InnerConfig {
    /// The tabular DAG setup: Adam(0.01) with beta1 = 0, beta2 = 0.999,
    /// eps = 1e-8, batches of 8 full episodes, gamma = 1, entropy 0.001.
    pub fn dag_defaults() -> Self {
        InnerConfig {
            gamma: 1.0,
            lambda: 1.0,
            entropy_coef: 0.001,
            batch_size: 8,
            standardize_advantages: false,
            optim: OptimConfig::adam(0.01),
        }
    }
}

/// The regular-return value table phi. It trains on host floats (its targets
/// never depend on the meta-parameters), or is pinned to a fixed table for
/// the masked-value probes.
pub enum RegularCritic {
    Learned { values: Vec<f64>, optim: HostOptim },
    Fixed { values: Vec<f64> },
}

impl RegularCritic {
    pub fn learned(values: Vec<f64>, optim_cfg: OptimConfig) -> Self {
        let optim = HostOptim::new(optim_cfg, values.len());
        RegularCritic::Learned { values, optim }
    }

    pub fn fixed(values: Vec<f64>) -> Self {
        RegularCritic::Fixed { values }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            RegularCritic::Learned { values, .. } => values,
            RegularCritic::Fixed { values } => values,
        }
    }

    /// One half-MSE descent step toward the discounted returns. No-op for a
    /// fixed table.
    pub fn fit(&mut self, batch: &[Trajectory], gamma: f64) {
        let RegularCritic::Learned { values, optim } = self else {
            return;
        };
        let mut grad = vec![0.0; values.len()];
        let mut n = 0usize;
        for traj in batch {
            let returns = traj.returns(gamma);
            for (t, &s) in traj.states[..traj.len()].iter().enumerate() {
                grad[s] += values[s] - returns[t];
                n += 1;
            }
        }
        if n == 0 {
            return;
        }
        for g in grad.iter_mut() {
            *g /= n as f64;
        }
        optim.apply(values, &grad, Direction::Descent);
    }
}

/// Policy and weighted baseline as live tape values, together with their
/// taped optimizer states.
pub struct TapedAgent {
    pub theta: DiffValue,
    pub psi: Option<DiffValue>,
    pub opt_theta: TapedOptim,
    pub opt_psi: Option<TapedOptim>,
}

impl TapedAgent {
    /// Register host tables on a tape as non-differentiable inputs with fresh
    /// (zero) optimizer moments.
    pub fn register_fresh(
        tape: &mut Tape,
        ac: &TabularActorCritic,
        with_psi: bool,
        optim: OptimConfig,
    ) -> Result<Self> {
        let theta = tape.constant(ac.theta.clone())?;
        let opt_theta = TapedOptim::fresh(tape, optim, theta.rows(), theta.cols())?;
        let (psi, opt_psi) = if with_psi {
            let psi = tape.constant(Mat::col(&ac.psi))?;
            let opt = TapedOptim::fresh(tape, optim, psi.rows(), 1)?;
            (Some(psi), Some(opt))
        } else {
            (None, None)
        };
        Ok(TapedAgent { theta, psi, opt_theta, opt_psi })
    }
}

/// Everything an inner update needs besides the agent itself.
pub struct InnerStepCtx<'a> {
    pub env: &'a dyn EpisodicMdp,
    pub counts: &'a Arc<Vec<usize>>,
    pub estimator: &'a dyn AdvantageEstimator,
    pub weights: Option<WeightsNode>,
    pub cfg: &'a InnerConfig,
    pub streams: Streams,
}

/// One full inner update: sample a batch from the current policy, compute the
/// chosen advantages, ascend theta on the policy objective, descend psi on
/// the weighted-return loss (PWR only), and fit phi on regular returns.
/// Returns the batch that was used.
pub fn inner_step(
    tape: &mut Tape,
    agent: &mut TapedAgent,
    phi: &mut RegularCritic,
    ctx: &InnerStepCtx,
    episode_base: u64,
) -> Result<Vec<Trajectory>> {
    let theta_mat = tape.value(agent.theta).clone();
    let batch = sample_batch(
        &theta_mat,
        ctx.env,
        ctx.counts,
        ctx.cfg.batch_size,
        &ctx.streams,
        episode_base,
    );
    inner_update_on_batch(tape, agent, phi.values(), ctx, &batch)?;
    phi.fit(&batch, ctx.cfg.gamma);
    Ok(batch)
}

/// The update half of [`inner_step`]: advance theta (and psi) on an already
/// sampled batch. The regular value table enters as plain numbers and is not
/// touched.
pub fn inner_update_on_batch(
    tape: &mut Tape,
    agent: &mut TapedAgent,
    phi_values: &[f64],
    ctx: &InnerStepCtx,
    batch: &[Trajectory],
) -> Result<()> {
    if ctx.estimator.needs_weights() && ctx.weights.is_none() {
        return Err(CoreError::Estimator(format!(
            "estimator '{}' needs a weight source",
            ctx.estimator.name()
        )));
    }
    if ctx.estimator.needs_weighted_baseline() && agent.psi.is_none() {
        return Err(CoreError::Estimator(format!(
            "estimator '{}' needs a weighted-return baseline",
            ctx.estimator.name()
        )));
    }

    let est_ctx = EstimatorCtx {
        values: phi_values,
        weighted_baseline: agent.psi,
        weights: ctx.weights.as_ref(),
        gamma: ctx.cfg.gamma,
        lambda: ctx.cfg.lambda,
    };
    let mut advantages = Vec::with_capacity(batch.len());
    let mut weighted_returns = Vec::with_capacity(batch.len());
    for traj in batch {
        let est = ctx.estimator.estimate(tape, traj, &est_ctx)?;
        advantages.push(est.advantages);
        if let Some(r) = est.weighted_returns {
            weighted_returns.push(r);
        }
    }

    let objective = inner_policy_objective(
        tape,
        agent.theta,
        ctx.counts,
        batch,
        &advantages,
        ctx.cfg.entropy_coef,
        ctx.cfg.standardize_advantages,
    )?;
    let theta_grad = match tape.grad_nodes(objective, &[agent.theta])?[0] {
        Some(g) => g,
        None => tape.constant(Mat::zeros(agent.theta.rows(), agent.theta.cols()))?,
    };
    agent.theta = agent.opt_theta.apply(tape, agent.theta, theta_grad, Direction::Ascent)?;

    if ctx.estimator.needs_weighted_baseline() {
        let psi = agent.psi.expect("checked above");
        let loss = value_loss(tape, psi, batch, &weighted_returns)?;
        let psi_grad = match tape.grad_nodes(loss, &[psi])?[0] {
            Some(g) => g,
            None => tape.constant(Mat::zeros(psi.rows(), 1))?,
        };
        let opt = agent.opt_psi.as_mut().expect("checked above");
        agent.psi = Some(opt.apply(tape, psi, psi_grad, Direction::Descent)?);
    }
    Ok(())
}

/// Repeated inner updates with fixed weights, persisting all state on the
/// host between single-update tapes. This is the engine behind frozen-weight
/// evaluation and the non-meta baselines.
pub struct PlainTrainer {
    theta: Mat,
    psi: Vec<f64>,
    phi: RegularCritic,
    theta_moments: PersistentMoments,
    psi_moments: PersistentMoments,
    counts: Arc<Vec<usize>>,
    cfg: InnerConfig,
    episodes_seen: u64,
    updates: u64,
}

impl PlainTrainer {
    pub fn new(env: &dyn EpisodicMdp, cfg: InnerConfig, init_rng: &mut dyn RngCore) -> Self {
        let n = env.num_states();
        let a = env.max_actions();
        let ac = TabularActorCritic::random_init(n, a, init_rng);
        PlainTrainer {
            theta: ac.theta,
            psi: ac.psi,
            phi: RegularCritic::learned(ac.phi, cfg.optim),
            theta_moments: PersistentMoments::zeros(n, a),
            psi_moments: PersistentMoments::zeros(n, 1),
            counts: action_counts(env),
            cfg,
            episodes_seen: 0,
            updates: 0,
        }
    }

    pub fn episodes_seen(&self) -> u64 {
        self.episodes_seen
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn snapshot(&self) -> TabularActorCritic {
        TabularActorCritic {
            theta: self.theta.clone(),
            psi: self.psi.clone(),
            phi: self.phi.values().to_vec(),
        }
    }

    /// One update with a fixed weight matrix (or none for mc/lambda).
    /// Returns the per-episode returns of the batch just consumed.
    pub fn update(
        &mut self,
        env: &dyn EpisodicMdp,
        estimator: &dyn AdvantageEstimator,
        weight_matrix: Option<&Mat>,
        streams: &Streams,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let weights = match weight_matrix {
            Some(m) => Some(WeightsNode::Table(tape.constant(m.clone())?)),
            None => None,
        };
        let with_psi = estimator.needs_weighted_baseline();
        let theta = tape.constant(self.theta.clone())?;
        let opt_theta = self.theta_moments.register(&mut tape, self.cfg.optim)?;
        let (psi, opt_psi) = if with_psi {
            let psi = tape.constant(Mat::col(&self.psi))?;
            let opt = self.psi_moments.register(&mut tape, self.cfg.optim)?;
            (Some(psi), Some(opt))
        } else {
            (None, None)
        };
        let mut agent = TapedAgent { theta, psi, opt_theta, opt_psi };

        let ctx = InnerStepCtx {
            env,
            counts: &self.counts,
            estimator,
            weights,
            cfg: &self.cfg,
            streams: *streams,
        };
        let batch = inner_step(&mut tape, &mut agent, &mut self.phi, &ctx, self.episodes_seen)?;

        self.theta = tape.value(agent.theta).clone();
        self.theta_moments.absorb(&tape, &agent.opt_theta);
        if let (Some(psi), Some(opt)) = (agent.psi, agent.opt_psi.as_ref()) {
            self.psi = tape.value(psi).as_slice().to_vec();
            self.psi_moments.absorb(&tape, opt);
        }
        self.episodes_seen += batch.len() as u64;
        self.updates += 1;
        Ok(batch.iter().map(|t| t.total_return()).collect())
    }
}
