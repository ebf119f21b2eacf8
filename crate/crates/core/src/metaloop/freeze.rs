//! Frozen-weight evaluation: train a fresh agent with a fixed estimator and
//! weight matrix, recording how fast it reaches a score threshold.

use std::time::{Duration, Instant};

use crate::agent::{InnerConfig, PlainTrainer, TabularActorCritic};
use crate::credit::AdvantageEstimator;
use crate::diffmath::Mat;
use crate::envs::EpisodicMdp;
use crate::rng::{names, Streams};
use crate::{CoreError, Result};

/// Evaluation-run settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreezeConfig {
    pub max_episodes: usize,
    /// Fraction of the maximum score that counts as solved.
    pub threshold_fraction: f64,
    /// Trailing-mean window (in episodes) for the crossing test.
    pub threshold_window: usize,
    /// Stop once the threshold is crossed instead of exhausting the budget.
    pub stop_at_threshold: bool,
}

impl FreezeConfig {
    pub fn new(max_episodes: usize) -> Self {
        FreezeConfig {
            max_episodes,
            threshold_fraction: 0.95,
            threshold_window: 100,
            stop_at_threshold: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return Err(CoreError::Invalid("threshold_fraction must be in (0, 1]".into()));
        }
        if self.threshold_window < 1 {
            return Err(CoreError::Invalid("threshold_window must be >= 1".into()));
        }
        if self.max_episodes < 1 {
            return Err(CoreError::Invalid("max_episodes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// Per-episode returns in sampling order.
    pub returns: Vec<f64>,
    /// First episode index whose trailing-window mean reaches the threshold.
    pub episodes_to_threshold: Option<usize>,
    pub wall_clock: Duration,
}

/// Smallest index i (with a full window behind it) such that the mean of
/// `series[i+1-window ..= i]` reaches `fraction * max_score`.
pub fn episodes_to_threshold(
    series: &[f64],
    fraction: f64,
    window: usize,
    max_score: f64,
) -> Result<Option<usize>> {
    if series.is_empty() {
        return Err(CoreError::Invalid("empty series".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::Invalid("fraction must be in (0, 1]".into()));
    }
    if window < 1 {
        return Err(CoreError::Invalid("window must be >= 1".into()));
    }
    let target = fraction * max_score * window as f64;
    let mut rolling = 0.0;
    for (i, &r) in series.iter().enumerate() {
        rolling += r;
        if i >= window {
            rolling -= series[i - window];
        }
        if i + 1 >= window && rolling >= target {
            return Ok(Some(i));
        }
    }
    Ok(None)
}

/// Train a fresh agent with frozen weights (or a plain estimator when
/// `weight_matrix` is none) and record per-episode returns and the
/// episodes-to-threshold crossing.
pub fn freeze_and_evaluate(
    env: &dyn EpisodicMdp,
    estimator: &dyn AdvantageEstimator,
    weight_matrix: Option<&Mat>,
    inner_cfg: &InnerConfig,
    freeze_cfg: &FreezeConfig,
    streams: &Streams,
) -> Result<RunMetrics> {
    freeze_and_evaluate_with_agent(env, estimator, weight_matrix, inner_cfg, freeze_cfg, streams)
        .map(|(metrics, _)| metrics)
}

/// [`freeze_and_evaluate`], also returning the trained agent tables for
/// inspection.
pub fn freeze_and_evaluate_with_agent(
    env: &dyn EpisodicMdp,
    estimator: &dyn AdvantageEstimator,
    weight_matrix: Option<&Mat>,
    inner_cfg: &InnerConfig,
    freeze_cfg: &FreezeConfig,
    streams: &Streams,
) -> Result<(RunMetrics, TabularActorCritic)> {
    freeze_cfg.validate()?;
    if let Some(w) = weight_matrix {
        if w.rows() != env.num_states() || w.cols() != env.num_states() {
            return Err(CoreError::Invalid(format!(
                "weight matrix is {}x{} but the environment has {} states",
                w.rows(),
                w.cols(),
                env.num_states()
            )));
        }
    }
    let start = Instant::now();
    let mut init_rng = streams.stream(names::INIT, 0);
    let mut trainer = PlainTrainer::new(env, *inner_cfg, &mut init_rng);

    let window = freeze_cfg.threshold_window;
    let target = freeze_cfg.threshold_fraction * env.max_return() * window as f64;
    let mut returns = Vec::new();
    let mut rolling = 0.0;
    let mut crossed: Option<usize> = None;

    while (trainer.episodes_seen() as usize) < freeze_cfg.max_episodes {
        let batch_returns = trainer.update(env, estimator, weight_matrix, streams)?;
        for r in batch_returns {
            returns.push(r);
            let i = returns.len() - 1;
            rolling += r;
            if i >= window {
                rolling -= returns[i - window];
            }
            if crossed.is_none() && i + 1 >= window && rolling >= target {
                crossed = Some(i);
            }
        }
        if crossed.is_some() && freeze_cfg.stop_at_threshold {
            break;
        }
    }

    Ok((
        RunMetrics { returns, episodes_to_threshold: crossed, wall_clock: start.elapsed() },
        trainer.snapshot(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_at_max_crosses_immediately() {
        let series = vec![10.0; 5];
        assert_eq!(episodes_to_threshold(&series, 0.95, 1, 10.0).unwrap(), Some(0));
    }

    #[test]
    fn series_below_threshold_never_crosses() {
        let series = vec![1.0; 50];
        assert_eq!(episodes_to_threshold(&series, 0.95, 10, 10.0).unwrap(), None);
    }

    #[test]
    fn step_series_crosses_within_window_of_the_jump() {
        let mut series = vec![0.0; 50];
        series.extend(vec![10.0; 50]);
        let idx = episodes_to_threshold(&series, 0.95, 10, 10.0).unwrap().unwrap();
        assert!((50..60).contains(&idx), "index {idx}");
    }

    #[test]
    fn empty_series_is_an_error() {
        assert!(episodes_to_threshold(&[], 0.95, 10, 10.0).is_err());
    }

    #[test]
    fn window_must_be_full_before_crossing() {
        // First window-1 entries never qualify even if huge.
        let series = vec![100.0, 100.0, 0.0, 0.0, 0.0, 0.0];
        let idx = episodes_to_threshold(&series, 0.5, 3, 10.0).unwrap();
        assert_eq!(idx, Some(2));
    }
}
