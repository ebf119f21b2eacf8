//! The outer loop: learning the pairwise weight table by gradient through
//! the inner updates.

mod freeze;
mod online;
mod reset;

pub use freeze::{
    episodes_to_threshold, freeze_and_evaluate, freeze_and_evaluate_with_agent, FreezeConfig,
    RunMetrics,
};
pub use online::OnlineLoop;
pub use reset::{composed_objective_fixed_batches, reset_meta_step};

use std::sync::Arc;

use crate::agent::{inner_policy_objective, OptimConfig, Trajectory};
use crate::credit::lambda_advantages;
use crate::diffmath::{DiffValue, Mat, Tape};
use crate::{CoreError, Result};

/// How the outer loop runs: `Online` interleaves one meta update with every
/// policy update and reuses the evaluation trajectory as the next training
/// trajectory; `Reset` re-randomizes the inner parameters every outer step
/// and differentiates through a whole block of K inner updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaMode {
    Online,
    Reset,
}

/// Outer-loop settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaConfig {
    pub mode: MetaMode,
    /// K: inner updates per outer update (reset mode).
    pub inner_updates_per_outer: usize,
    /// N: total outer updates.
    pub outer_updates: usize,
    pub outer_optim: OptimConfig,
    /// Lambda of the regular advantage in the outer objective.
    pub outer_lambda: f64,
    /// Global-norm bound applied to the outer gradient.
    pub clip_norm: f64,
}

impl MetaConfig {
    /// The reset-training setup: 16 inner updates per outer update, 2000
    /// outer updates, outer Adam with the inner hyperparameters, clip 0.5.
    pub fn reset_defaults() -> Self {
        MetaConfig {
            mode: MetaMode::Reset,
            inner_updates_per_outer: 16,
            outer_updates: 2000,
            outer_optim: OptimConfig::adam(0.01),
            outer_lambda: 1.0,
            clip_norm: 0.5,
        }
    }

    pub fn online_defaults() -> Self {
        MetaConfig { mode: MetaMode::Online, inner_updates_per_outer: 1, ..Self::reset_defaults() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_updates_per_outer < 1 {
            return Err(CoreError::Invalid("inner_updates_per_outer must be >= 1".into()));
        }
        if self.outer_updates < 1 {
            return Err(CoreError::Invalid("outer_updates must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(CoreError::Invalid("clip_norm must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.outer_lambda) {
            return Err(CoreError::Invalid("outer_lambda must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-outer-step bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterObjectiveRecord {
    pub outer_step: usize,
    pub objective: f64,
    pub grad_norm_pre_clip: f64,
    pub grad_norm_post_clip: f64,
    /// Filled by the caller when it writes a weight snapshot at this step.
    pub snapshot: Option<usize>,
}

/// The outer policy-gradient objective on a batch sampled from the updated
/// policy: the mean advantage-weighted log-likelihood under `theta_prime`,
/// with regular lambda advantages computed from the phi table. Advantages
/// enter as constants; only the log-probability terms are differentiable, so
/// the gradient reaches the weight table through theta_prime alone.
pub fn outer_objective(
    tape: &mut Tape,
    batch: &[Trajectory],
    theta_prime: DiffValue,
    counts: &Arc<Vec<usize>>,
    phi_values: &[f64],
    gamma: f64,
    outer_lambda: f64,
) -> Result<DiffValue> {
    let mut advantages = Vec::with_capacity(batch.len());
    for traj in batch {
        let adv = lambda_advantages(traj, phi_values, gamma, outer_lambda)?;
        advantages.push(tape.constant_col(&adv)?);
    }
    inner_policy_objective(tape, theta_prime, counts, batch, &advantages, 0.0, false)
}

/// Scale `grad` so its global (Frobenius) norm is at most `clip_norm`;
/// direction is preserved. Returns (pre-clip, post-clip) norms.
pub fn clip_by_global_norm(grad: &mut Mat, clip_norm: f64) -> (f64, f64) {
    let pre = grad.squared_norm().sqrt();
    if pre > clip_norm {
        let scale = clip_norm / pre;
        for g in grad.as_mut_slice() {
            *g *= scale;
        }
        (pre, clip_norm)
    } else {
        (pre, pre)
    }
}
