//! A nested two-phase DAG family.
//!
//! Phase 1 is `depth` rewardless binary decisions; phase 2 replays the
//! decisions in LIFO order, paying +1 when the revealed decision matches the
//! per-depth target bit and -1 otherwise. The decision made at phase-1 step
//! `depth-1-k` is revealed at reveal step `k`, so the very first decision
//! decides the reward on the final transition.
//!
//! State ids encode only the local bit (the previous action in phase 1, the
//! revealed decision in phase 2); the pending decisions travel in the episode
//! scratch word. `reveal_padding` inserts single-action zero-reward filler
//! steps before each reveal to stretch the delays further.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EpisodeState, EpisodicMdp, Step};
use crate::{CoreError, Result};

/// Role of a state in the DAG layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DagStateKind {
    /// Phase-1 state at decision step `step`; `prev_bit` is the action taken
    /// at the previous step (absent at the root).
    Decision { step: usize, prev_bit: Option<usize> },
    /// Zero-reward filler state `index` (0-based) ahead of reveal `segment`.
    Filler { segment: usize, index: usize, bit: usize },
    /// Reveal state of `segment`, carrying the revealed decision bit.
    Reveal { segment: usize, bit: usize },
}

#[derive(Debug, Clone)]
pub struct NestedDag {
    depth: usize,
    target_bits: Vec<u8>,
    reveal_padding: usize,
}

/// Build a nested DAG of the given depth. `seed` fixes the per-depth target
/// bits; `reveal_padding` is the number of filler steps ahead of each reveal.
pub fn dag_make(depth: usize, seed: u64, reveal_padding: usize) -> Result<NestedDag> {
    if depth < 1 {
        return Err(CoreError::Env(format!("dag depth must be >= 1, got {depth}")));
    }
    if depth > 20 {
        return Err(CoreError::Env(format!(
            "dag depth {depth} too large for exact analysis (max 20)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_bits = (0..depth).map(|_| rng.random_range(0..2u8)).collect();
    Ok(NestedDag { depth, target_bits, reveal_padding })
}

impl NestedDag {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn reveal_padding(&self) -> usize {
        self.reveal_padding
    }

    pub fn target_bits(&self) -> &[u8] {
        &self.target_bits
    }

    fn num_phase1_states(&self) -> usize {
        2 * self.depth - 1
    }

    /// Id of the phase-1 state at `step` with previous action `prev_bit`.
    pub fn decision_state(&self, step: usize, prev_bit: usize) -> usize {
        debug_assert!(step < self.depth);
        if step == 0 {
            0
        } else {
            1 + 2 * (step - 1) + prev_bit
        }
    }

    fn segment_base(&self, segment: usize) -> usize {
        self.num_phase1_states() + segment * 2 * (self.reveal_padding + 1)
    }

    pub fn filler_state(&self, segment: usize, index: usize, bit: usize) -> usize {
        debug_assert!(index < self.reveal_padding);
        self.segment_base(segment) + 2 * index + bit
    }

    pub fn reveal_state(&self, segment: usize, bit: usize) -> usize {
        self.segment_base(segment) + 2 * self.reveal_padding + bit
    }

    pub fn classify(&self, state: usize) -> DagStateKind {
        let p1 = self.num_phase1_states();
        if state < p1 {
            if state == 0 {
                DagStateKind::Decision { step: 0, prev_bit: None }
            } else {
                let step = 1 + (state - 1) / 2;
                DagStateKind::Decision { step, prev_bit: Some((state - 1) % 2) }
            }
        } else {
            let width = 2 * (self.reveal_padding + 1);
            let segment = (state - p1) / width;
            let offset = (state - p1) % width;
            let bit = offset % 2;
            if offset / 2 < self.reveal_padding {
                DagStateKind::Filler { segment, index: offset / 2, bit }
            } else {
                DagStateKind::Reveal { segment, bit }
            }
        }
    }

    /// The decision step whose choice is revealed at `segment`.
    pub fn revealed_decision(&self, segment: usize) -> usize {
        self.depth - 1 - segment
    }

    fn reveal_reward(&self, segment: usize, bit: usize) -> f64 {
        if bit == self.target_bits[self.revealed_decision(segment)] as usize {
            1.0
        } else {
            -1.0
        }
    }

    /// Entry into phase-2 segment `segment` carrying decision bit `bit`:
    /// first state of the segment and the reward on the entering transition.
    fn enter_segment(&self, segment: usize, bit: usize) -> (usize, f64) {
        if self.reveal_padding > 0 {
            (self.filler_state(segment, 0, bit), 0.0)
        } else {
            (self.reveal_state(segment, bit), self.reveal_reward(segment, bit))
        }
    }
}

impl EpisodicMdp for NestedDag {
    fn num_states(&self) -> usize {
        self.num_phase1_states() + 2 * self.depth * (self.reveal_padding + 1)
    }

    fn actions_at(&self, state: usize) -> usize {
        match self.classify(state) {
            DagStateKind::Decision { .. } => 2,
            _ => 1,
        }
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> EpisodeState {
        EpisodeState::start(0)
    }

    fn step(&self, ep: &mut EpisodeState, action: usize, _rng: &mut dyn RngCore) -> Step {
        debug_assert!(action < self.actions_at(ep.state));
        let (next, reward) = match self.classify(ep.state) {
            DagStateKind::Decision { step, .. } => {
                ep.memory |= (action as u64 & 1) << step;
                if step + 1 < self.depth {
                    (self.decision_state(step + 1, action), 0.0)
                } else {
                    let bit = ((ep.memory >> self.revealed_decision(0)) & 1) as usize;
                    self.enter_segment(0, bit)
                }
            }
            DagStateKind::Filler { segment, index, bit } => {
                if index + 1 < self.reveal_padding {
                    (self.filler_state(segment, index + 1, bit), 0.0)
                } else {
                    (self.reveal_state(segment, bit), self.reveal_reward(segment, bit))
                }
            }
            DagStateKind::Reveal { segment, .. } => {
                debug_assert!(segment + 1 < self.depth, "stepping from a terminal state");
                let bit = ((ep.memory >> self.revealed_decision(segment + 1)) & 1) as usize;
                self.enter_segment(segment + 1, bit)
            }
        };
        let done = matches!(self.classify(next), DagStateKind::Reveal { segment, .. } if segment == self.depth - 1);
        ep.state = next;
        ep.t += 1;
        Step { next_state: next, reward, done }
    }

    fn max_return(&self) -> f64 {
        self.depth as f64
    }

    fn episode_length_bound(&self) -> usize {
        2 * self.depth - 1 + self.reveal_padding * self.depth
    }
}

/// Simulate the trajectory for one decision sequence; returns the visited
/// states (length T+1) and per-transition rewards (length T).
fn simulate(env: &NestedDag, decisions: u64) -> (Vec<usize>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ep = env.reset(&mut rng);
    let mut states = vec![ep.state];
    let mut rewards = Vec::new();
    loop {
        let action = match env.classify(ep.state) {
            DagStateKind::Decision { step, .. } => ((decisions >> step) & 1) as usize,
            _ => 0,
        };
        let step = env.step(&mut ep, action, &mut rng);
        states.push(step.next_state);
        rewards.push(step.reward);
        if step.done {
            return (states, rewards);
        }
    }
}

/// Per-state optimal values with discount 1: the maximum return-to-go over
/// every trajectory that passes through the state. Dynamics in phase 2 are
/// driven by the episode scratch word, so a per-state Bellman recursion is
/// not well posed; instead all 2^depth decision sequences are enumerated
/// (depth is capped at 20 in `dag_make`) and each state keeps the best
/// suffix return seen.
pub fn dag_optimal_values(env: &NestedDag) -> Vec<f64> {
    let mut values = vec![f64::NEG_INFINITY; env.num_states()];
    for decisions in 0u64..(1 << env.depth()) {
        let (states, rewards) = simulate(env, decisions);
        let mut suffix = 0.0;
        let mut suffixes = vec![0.0; states.len()];
        for t in (0..states.len()).rev() {
            suffixes[t] = suffix;
            if t > 0 {
                suffix += rewards[t - 1];
            }
        }
        for (t, &s) in states.iter().enumerate() {
            values[s] = values[s].max(suffixes[t]);
        }
    }
    // Every state in this family is reachable.
    debug_assert!(values.iter().all(|v| v.is_finite()));
    values
}

/// Zero the values of all phase-1 states with decision step < `mask_depth`.
/// The full mask (`mask_depth == depth`) zeroes every state.
pub fn dag_mask_values(values: &[f64], env: &NestedDag, mask_depth: usize) -> Result<Vec<f64>> {
    if mask_depth > env.depth() {
        return Err(CoreError::Env(format!(
            "mask depth {mask_depth} out of range 0..={}",
            env.depth()
        )));
    }
    if values.len() != env.num_states() {
        return Err(CoreError::Env(format!(
            "value table has {} entries for {} states",
            values.len(),
            env.num_states()
        )));
    }
    if mask_depth == env.depth() {
        return Ok(vec![0.0; values.len()]);
    }
    let mut out = values.to_vec();
    for (s, v) in out.iter_mut().enumerate() {
        if let DagStateKind::Decision { step, .. } = env.classify(s) {
            if step < mask_depth {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Reachability of ordered state pairs: entry (i, j) is true when some
/// trajectory visits state i at time t and state j at a later time.
pub fn dag_reachable_pairs(env: &NestedDag) -> Vec<Vec<bool>> {
    let n = env.num_states();
    let mut reachable = vec![vec![false; n]; n];
    for decisions in 0u64..(1 << env.depth()) {
        let (states, _) = simulate(env, decisions);
        for i in 0..states.len() {
            for j in i + 1..states.len() {
                reachable[states[i]][states[j]] = true;
            }
        }
    }
    reachable
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form optimal values, derived independently of the enumeration:
    /// reveal states are worth the number of remaining reveals; filler states
    /// add their own segment's (already fixed) reward; a phase-1 state at
    /// step k >= 1 is worth depth - 1 +/- 1 depending on whether its encoded
    /// previous decision matches the target.
    fn closed_form_values(env: &NestedDag) -> Vec<f64> {
        let d = env.depth();
        (0..env.num_states())
            .map(|s| match env.classify(s) {
                DagStateKind::Decision { step: 0, .. } => d as f64,
                DagStateKind::Decision { step, prev_bit } => {
                    let matched =
                        prev_bit.unwrap() == env.target_bits()[step - 1] as usize;
                    (d - 1) as f64 + if matched { 1.0 } else { -1.0 }
                }
                DagStateKind::Filler { segment, bit, .. } => {
                    let matched =
                        bit == env.target_bits()[env.revealed_decision(segment)] as usize;
                    (d - 1 - segment) as f64 + if matched { 1.0 } else { -1.0 }
                }
                DagStateKind::Reveal { segment, .. } => (d - 1 - segment) as f64,
            })
            .collect()
    }

    #[test]
    fn rejects_zero_depth() {
        assert!(dag_make(0, 0, 0).is_err());
    }

    #[test]
    fn smallest_instance_layout() {
        let env = dag_make(1, 0, 0).unwrap();
        assert_eq!(env.num_states(), 3);
        assert_eq!(env.episode_length_bound(), 1);
        assert_eq!(env.actions_at(0), 2);
        assert_eq!(env.max_return(), 1.0);
    }

    #[test]
    fn depth8_layout_counts() {
        let env = dag_make(8, 3, 0).unwrap();
        assert_eq!(env.num_states(), 31);
        assert_eq!(env.episode_length_bound(), 15);
        assert_eq!(env.max_return(), 8.0);
        let decision_states = (0..env.num_states())
            .filter(|&s| matches!(env.classify(s), DagStateKind::Decision { .. }))
            .count();
        assert_eq!(decision_states, 15);
    }

    #[test]
    fn optimal_decisions_earn_max_return_every_episode() {
        for depth in [1, 3, 8] {
            let env = dag_make(depth, 11, 0).unwrap();
            let mut optimal = 0u64;
            for (k, &b) in env.target_bits().iter().enumerate() {
                optimal |= (b as u64) << k;
            }
            let (_, rewards) = simulate(&env, optimal);
            assert_eq!(rewards.iter().sum::<f64>(), depth as f64);
            assert_eq!(rewards.len(), env.episode_length_bound());
        }
    }

    #[test]
    fn reveal_reward_depends_only_on_matched_decision() {
        // Exhaustively: flipping any decision other than the matched one
        // leaves the reward at a given reveal unchanged.
        for depth in [1, 2, 3, 4, 5, 6, 8, 10] {
            let env = dag_make(depth, depth as u64, 0).unwrap();
            for decisions in 0u64..(1 << depth) {
                let (_, rewards) = simulate(&env, decisions);
                for segment in 0..depth {
                    let matched = env.revealed_decision(segment);
                    let reward_index = depth - 1 + segment;
                    for flip in 0..depth {
                        if flip == matched {
                            continue;
                        }
                        let (_, flipped) = simulate(&env, decisions ^ (1 << flip));
                        assert_eq!(rewards[reward_index], flipped[reward_index]);
                    }
                }
            }
        }
    }

    #[test]
    fn episode_length_with_padding() {
        let env = dag_make(3, 0, 2).unwrap();
        assert_eq!(env.episode_length_bound(), 2 * 3 - 1 + 2 * 3);
        assert_eq!(env.num_states(), 5 + 2 * 3 * 3);
        let (states, rewards) = simulate(&env, 0b101);
        assert_eq!(rewards.len(), env.episode_length_bound());
        assert_eq!(states.len(), rewards.len() + 1);
        // Fillers pay nothing; only the three reveal transitions pay.
        let nonzero = rewards.iter().filter(|r| **r != 0.0).count();
        assert_eq!(nonzero, 3);
    }

    #[test]
    fn optimal_values_smallest_instance() {
        let env = dag_make(1, 0, 0).unwrap();
        let v = dag_optimal_values(&env);
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn optimal_values_match_closed_form() {
        for (depth, padding) in [(1, 0), (4, 0), (8, 0), (10, 0), (3, 2)] {
            let env = dag_make(depth, 7 + depth as u64, padding).unwrap();
            let got = dag_optimal_values(&env);
            let want = closed_form_values(&env);
            assert_eq!(got, want, "depth {depth} padding {padding}");
        }
    }

    #[test]
    fn root_value_equals_max_return_at_depth8() {
        let env = dag_make(8, 5, 0).unwrap();
        assert_eq!(dag_optimal_values(&env)[0], 8.0);
    }

    #[test]
    fn depth16_instance_is_exactly_analyzable() {
        let env = dag_make(16, 4, 0).unwrap();
        assert_eq!(env.num_states(), 63);
        assert_eq!(env.episode_length_bound(), 31);
        let v = dag_optimal_values(&env);
        assert_eq!(v[0], 16.0);
        assert_eq!(v, closed_form_values(&env));
    }

    #[test]
    fn mask_depth_zero_changes_nothing() {
        let env = dag_make(4, 1, 0).unwrap();
        let v = dag_optimal_values(&env);
        assert_eq!(dag_mask_values(&v, &env, 0).unwrap(), v);
    }

    #[test]
    fn full_mask_zeroes_everything() {
        let env = dag_make(4, 1, 0).unwrap();
        let v = dag_optimal_values(&env);
        let masked = dag_mask_values(&v, &env, 4).unwrap();
        assert!(masked.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn half_mask_zeroes_only_shallow_phase1_states() {
        let env = dag_make(4, 1, 0).unwrap();
        let v = dag_optimal_values(&env);
        let masked = dag_mask_values(&v, &env, 2).unwrap();
        for s in 0..env.num_states() {
            match env.classify(s) {
                DagStateKind::Decision { step, .. } if step < 2 => {
                    assert_eq!(masked[s], 0.0)
                }
                _ => assert_eq!(masked[s], v[s]),
            }
        }
    }

    #[test]
    fn mask_depth_out_of_range_errors() {
        let env = dag_make(4, 1, 0).unwrap();
        let v = dag_optimal_values(&env);
        assert!(dag_mask_values(&v, &env, 5).is_err());
    }

    #[test]
    fn target_bits_are_seed_deterministic() {
        let a = dag_make(8, 42, 0).unwrap();
        let b = dag_make(8, 42, 0).unwrap();
        let c = dag_make(8, 43, 0).unwrap();
        assert_eq!(a.target_bits(), b.target_bits());
        assert!(a.target_bits() != c.target_bits() || a.depth() <= 2);
    }

    #[test]
    fn reachability_includes_terminal_columns() {
        let env = dag_make(3, 2, 0).unwrap();
        let reach = dag_reachable_pairs(&env);
        // Root reaches both terminal reveal states.
        let last0 = env.reveal_state(2, 0);
        let last1 = env.reveal_state(2, 1);
        assert!(reach[0][last0] && reach[0][last1]);
        // Nothing reaches the root.
        assert!((0..env.num_states()).all(|s| !reach[s][0]));
    }
}
