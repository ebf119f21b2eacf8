//! Episodic tabular MDP environments with delayed-consequence structure.

mod dag;
mod umbrella;

pub use dag::{dag_make, dag_mask_values, dag_optimal_values, dag_reachable_pairs, DagStateKind, NestedDag};
pub use umbrella::{umbrella_make, NoiseKind, UmbrellaChain};

use rand::RngCore;

/// Outcome of one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub next_state: usize,
    pub reward: f64,
    /// Termination is signaled here, never by a sentinel state id.
    pub done: bool,
}

/// Per-episode cursor. Environments are immutable descriptions; everything
/// episode-specific lives here, including a small scratch word for
/// information the state id does not encode (the umbrella's initial action,
/// the DAG's pending decision bits).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeState {
    pub state: usize,
    pub t: usize,
    pub(crate) memory: u64,
}

impl EpisodeState {
    pub(crate) fn start(state: usize) -> Self {
        EpisodeState { state, t: 0, memory: 0 }
    }
}

/// An episodic tabular MDP. Every policy terminates within
/// `episode_length_bound` transitions.
pub trait EpisodicMdp: Send + Sync {
    fn num_states(&self) -> usize;

    /// Number of available actions in `state` (at least 1).
    fn actions_at(&self, state: usize) -> usize;

    fn reset(&self, rng: &mut dyn RngCore) -> EpisodeState;

    fn step(&self, ep: &mut EpisodeState, action: usize, rng: &mut dyn RngCore) -> Step;

    /// Best achievable expected return.
    fn max_return(&self) -> f64;

    fn episode_length_bound(&self) -> usize;

    fn max_actions(&self) -> usize {
        (0..self.num_states()).map(|s| self.actions_at(s)).max().unwrap_or(1)
    }
}
