//! The umbrella chain: one decision at the start, noisy rewards in between,
//! and a final reward determined solely by the initial action.

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::{EpisodeState, EpisodicMdp, Step};
use crate::{CoreError, Result};

/// Distribution of the intermediate noise rewards. Only the first two moments
/// matter for the variance analysis, so a two-point alternative to the
/// Gaussian is provided (mean +/- std with equal probability).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    TwoPoint,
}

/// A chain of `length` transitions. State ids are positions 0..=length; the
/// only choice is at state 0 and it decides the sign of the reward on the
/// final transition. Transitions 1..length-1 pay i.i.d. noise that is
/// independent of the initial action.
#[derive(Debug, Clone)]
pub struct UmbrellaChain {
    length: usize,
    noise_mean: f64,
    noise_std: f64,
    final_reward_magnitude: f64,
    target_action: usize,
    noise: NoiseKind,
}

/// Build an umbrella chain with `length` transitions (at least 2).
pub fn umbrella_make(
    length: usize,
    noise_mean: f64,
    noise_std: f64,
    target_action: usize,
) -> Result<UmbrellaChain> {
    if length < 2 {
        return Err(CoreError::Env(format!(
            "umbrella chain needs at least 2 transitions, got {length}"
        )));
    }
    if target_action > 1 {
        return Err(CoreError::Env(format!("target_action must be 0 or 1, got {target_action}")));
    }
    if !(noise_mean.is_finite() && noise_std.is_finite()) || noise_std < 0.0 {
        return Err(CoreError::Env("noise parameters must be finite, std >= 0".into()));
    }
    Ok(UmbrellaChain {
        length,
        noise_mean,
        noise_std,
        final_reward_magnitude: 1.0,
        target_action,
        noise: NoiseKind::Gaussian,
    })
}

impl UmbrellaChain {
    pub fn with_final_reward_magnitude(mut self, magnitude: f64) -> Self {
        self.final_reward_magnitude = magnitude;
        self
    }

    pub fn with_noise_kind(mut self, noise: NoiseKind) -> Self {
        self.noise = noise;
        self
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn noise_mean(&self) -> f64 {
        self.noise_mean
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn final_reward_magnitude(&self) -> f64 {
        self.final_reward_magnitude
    }

    pub fn target_action(&self) -> usize {
        self.target_action
    }

    /// The state entered on the final transition.
    pub fn final_state(&self) -> usize {
        self.length
    }

    fn draw_noise(&self, rng: &mut dyn RngCore) -> f64 {
        match self.noise {
            NoiseKind::Gaussian => {
                Normal::new(self.noise_mean, self.noise_std).expect("std >= 0").sample(rng)
            }
            NoiseKind::TwoPoint => {
                let coin = (rng.next_u64() >> 63) & 1;
                if coin == 0 {
                    self.noise_mean + self.noise_std
                } else {
                    self.noise_mean - self.noise_std
                }
            }
        }
    }

    /// Exact state values under a policy that picks the target action with
    /// probability `p_target` at state 0. The state id does not encode the
    /// initial action, so values for states past 0 marginalize over it.
    pub fn exact_state_values(&self, p_target: f64) -> Vec<f64> {
        let expected_final = (2.0 * p_target - 1.0) * self.final_reward_magnitude;
        (0..=self.length)
            .map(|t| {
                if t >= self.length {
                    0.0
                } else {
                    (self.length - 1 - t) as f64 * self.noise_mean + expected_final
                }
            })
            .collect()
    }

    /// Exact values of the pairwise-weighted return under the handcrafted
    /// weights that keep only the (state 0, final state) entry: only state 0
    /// sees any weighted reward.
    pub fn exact_weighted_values(&self, p_target: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.length + 1];
        v[0] = (2.0 * p_target - 1.0) * self.final_reward_magnitude;
        v
    }
}

impl EpisodicMdp for UmbrellaChain {
    fn num_states(&self) -> usize {
        self.length + 1
    }

    fn actions_at(&self, state: usize) -> usize {
        if state == 0 {
            2
        } else {
            1
        }
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> EpisodeState {
        EpisodeState::start(0)
    }

    fn step(&self, ep: &mut EpisodeState, action: usize, rng: &mut dyn RngCore) -> Step {
        debug_assert!(action < self.actions_at(ep.state));
        if ep.state == 0 {
            ep.memory = action as u64;
        }
        let next = ep.state + 1;
        let reward = if next < self.length {
            self.draw_noise(rng)
        } else {
            if ep.memory as usize == self.target_action {
                self.final_reward_magnitude
            } else {
                -self.final_reward_magnitude
            }
        };
        let done = next == self.length;
        ep.state = next;
        ep.t += 1;
        Step { next_state: next, reward, done }
    }

    fn max_return(&self) -> f64 {
        (self.length - 1) as f64 * self.noise_mean + self.final_reward_magnitude
    }

    fn episode_length_bound(&self) -> usize {
        self.length
    }
}
