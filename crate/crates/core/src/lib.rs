//! Pairwise-weighted temporal credit assignment for tabular policy-gradient
//! reinforcement learning.
//!
//! The crate provides:
//!
//! - [`diffmath`]: a reverse-mode autodiff tape over dense matrices whose
//!   gradients are themselves tape values, so chains of parameter updates
//!   (including Adam moments) can be differentiated end to end;
//! - [`envs`]: episodic tabular MDPs with delayed-consequence structure
//!   (an umbrella-style noisy chain and a nested two-phase DAG family);
//! - [`credit`]: pairwise weight tables and the advantage estimators built
//!   from them (Monte-Carlo, lambda, pairwise-weighted TD errors, and
//!   pairwise-weighted rewards), selectable by name;
//! - [`agent`]: a tabular softmax actor-critic whose updates can be recorded
//!   on a tape;
//! - [`metaloop`]: the outer loop that learns the pairwise weights by
//!   backpropagating a policy-gradient objective through the inner updates,
//!   in online and reset-training modes, plus frozen-weight evaluation.

pub mod agent;
pub mod credit;
pub mod diffmath;
pub mod envs;
pub mod metaloop;
pub mod rng;

use diffmath::DiffError;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("environment: {0}")]
    Env(String),
    #[error("estimator: {0}")]
    Estimator(String),
    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
