//! Experiment orchestration: meta training loops with logging and snapshots,
//! the method/seed suite, the umbrella variance demo, and the gradient-check
//! command.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use tca_core::agent::{
    action_counts, sample_episode, HostOptim, InnerConfig, OptimConfig, TabularActorCritic,
};
use tca_core::credit::{
    find_estimator, handcrafted_umbrella, mc_advantages, pwr_return_and_advantages,
    PairwiseWeightTable, WeightsNode,
};
use tca_core::diffmath::gradcheck::{check_gradients, run_op_suite};
use tca_core::diffmath::{Mat, Tape};
use tca_core::envs::{dag_make, EpisodicMdp, UmbrellaChain};
use tca_core::metaloop::{
    composed_objective_fixed_batches, reset_meta_step, OnlineLoop, OuterObjectiveRecord,
};
use tca_core::rng::{names, Streams};

use crate::config::ExperimentConfig;
use crate::methods::{find_method, MethodRun, RunContext};
use crate::metrics::{median_episodes, SuiteRow, SuiteSummary};
use crate::HarnessError;

/// Outcome of reset-mode meta training.
pub struct ResetTrainOutcome {
    pub weights: PairwiseWeightTable,
    pub log: Vec<OuterObjectiveRecord>,
    pub snapshots: Vec<(usize, Mat)>,
}

/// Run the configured number of reset-mode outer updates. On a mid-run
/// failure the last good weight table is returned inside the error so it can
/// be written out for diagnosis.
pub fn reset_train(
    cfg: &ExperimentConfig,
    estimator_name: &str,
    streams: &Streams,
    value_override: Option<&[f64]>,
) -> Result<ResetTrainOutcome, HarnessError> {
    let env = cfg.env.mdp();
    let estimator = find_estimator(estimator_name)?;
    let mut init_rng = streams.stream(names::INIT, u64::MAX);
    let mut weights = PairwiseWeightTable::init(env.num_states(), &mut init_rng);
    let mut outer_opt = HostOptim::new(cfg.meta.outer_optim, env.num_states() * env.num_states());
    let mut log = Vec::with_capacity(cfg.meta.outer_updates);
    let mut snapshots = Vec::new();

    for step in 0..cfg.meta.outer_updates {
        let last_good = weights.clone();
        let mut record = match reset_meta_step(
            &mut weights,
            &mut outer_opt,
            env,
            estimator,
            &cfg.inner,
            &cfg.meta,
            streams,
            step,
            value_override,
        ) {
            Ok(r) => r,
            Err(e) => {
                return Err(HarnessError::Abort {
                    message: format!("outer step {step}: {e}"),
                    last_good_weights: Some(last_good.weights()),
                })
            }
        };
        if cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0 {
            record.snapshot = Some(snapshots.len());
            snapshots.push((step, weights.weights()));
        }
        log.push(record);
    }
    Ok(ResetTrainOutcome { weights, log, snapshots })
}

/// Run online-mode meta training for the configured number of outer updates.
pub fn online_train(
    cfg: &ExperimentConfig,
    estimator_name: &str,
    streams: &Streams,
) -> Result<MethodRun, HarnessError> {
    let start = Instant::now();
    let env = cfg.env.mdp();
    let estimator = find_estimator(estimator_name)?;
    let mut init_rng = streams.stream(names::INIT, u64::MAX);
    let mut weights = PairwiseWeightTable::init(env.num_states(), &mut init_rng);
    let mut outer = OnlineLoop::new(env, &cfg.inner, &cfg.meta, streams)?;

    let mut returns = Vec::new();
    let mut log = Vec::with_capacity(cfg.meta.outer_updates);
    let mut snapshots = Vec::new();
    for step in 0..cfg.meta.outer_updates {
        let last_good = weights.clone();
        let (mut record, fresh) =
            match outer.step(env, estimator, &mut weights, &cfg.inner, &cfg.meta, streams) {
                Ok(out) => out,
                Err(e) => {
                    return Err(HarnessError::Abort {
                        message: format!("online step {step}: {e}"),
                        last_good_weights: Some(last_good.weights()),
                    })
                }
            };
        returns.extend(fresh);
        if cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0 {
            record.snapshot = Some(snapshots.len());
            snapshots.push((step, weights.weights()));
        }
        log.push(record);
    }
    let episodes_to_threshold = tca_core::metaloop::episodes_to_threshold(
        &returns,
        cfg.threshold_fraction,
        cfg.threshold_window,
        env.max_return(),
    )?;
    Ok(MethodRun {
        returns,
        episodes_to_threshold,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        weights: Some(weights.weights()),
        outer_log: log,
        snapshots,
        agent: Some(outer.snapshot()),
    })
}

/// Evaluate every configured (method, seed) pair. Methods share per-seed
/// evaluation streams, so comparisons are paired; runs execute in parallel
/// and the summary joins them in configuration order.
pub fn run_suite(cfg: &ExperimentConfig, methods: &[String]) -> Result<SuiteSummary, HarnessError> {
    let jobs: Vec<(String, u64)> = methods
        .iter()
        .flat_map(|m| cfg.seeds.iter().map(move |&s| (m.clone(), s)))
        .collect();
    let results: Vec<Result<(SuiteRow, MethodRun), HarnessError>> = jobs
        .par_iter()
        .map(|(method_name, seed)| {
            let method = find_method(method_name)?;
            let ctx = RunContext { cfg, seed: *seed };
            let run = method.evaluate(&ctx)?;
            Ok((
                SuiteRow {
                    method: method_name.clone(),
                    seed: *seed,
                    episodes_to_threshold: run.episodes_to_threshold,
                    episodes_ran: run.returns.len(),
                    wall_clock_secs: run.wall_clock_secs,
                },
                run,
            ))
        })
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        let (row, run) = r?;
        rows.push(row);
        runs.push(run);
    }

    let medians = methods
        .iter()
        .map(|m| {
            let per_seed: Vec<Option<usize>> = rows
                .iter()
                .filter(|r| &r.method == m)
                .map(|r| r.episodes_to_threshold)
                .collect();
            (m.clone(), median_episodes(&per_seed, cfg.max_episodes))
        })
        .collect();
    Ok(SuiteSummary { rows, medians, runs })
}

/// One row of the umbrella variance report.
#[derive(Debug, Clone, PartialEq)]
pub struct UmbrellaActionStats {
    pub action: usize,
    pub samples: usize,
    pub mc_mean: f64,
    pub mc_variance: f64,
    pub pwr_mean: f64,
    pub pwr_variance: f64,
}

/// First-action advantage statistics under the uniform policy with exact
/// value tables: Monte-Carlo versus handcrafted pairwise-weighted rewards.
pub fn umbrella_demo(
    env: &UmbrellaChain,
    episodes: usize,
    seed: u64,
) -> Result<Vec<UmbrellaActionStats>, HarnessError> {
    let counts = action_counts(env);
    let streams = Streams::new(seed);
    let theta = Mat::zeros(env.num_states(), env.max_actions());
    let v_regular = env.exact_state_values(0.5);
    let v_weighted = env.exact_weighted_values(0.5);
    let hw = handcrafted_umbrella(env);

    let mut mc_groups: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut pwr_groups: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for e in 0..episodes {
        let mut env_rng = streams.stream(names::ENV, e as u64);
        let mut act_rng = streams.stream(names::ACT, e as u64);
        let traj = sample_episode(&theta, env, &counts, &mut env_rng, &mut act_rng);
        let a0 = traj.actions[0];
        mc_groups[a0].push(mc_advantages(&traj, &v_regular, 1.0)[0]);
        let mut tape = Tape::new();
        let w = tape.constant(hw.weights().clone())?;
        let baseline = tape.constant(Mat::col(&v_weighted))?;
        let (_, adv) =
            pwr_return_and_advantages(&mut tape, &traj, baseline, &WeightsNode::Table(w), 1.0)?;
        pwr_groups[a0].push(tape.value(adv)[(0, 0)]);
    }

    let stats = |xs: &[f64]| -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, var)
    };
    Ok((0..2)
        .map(|a| {
            let (mc_mean, mc_variance) = stats(&mc_groups[a]);
            let (pwr_mean, pwr_variance) = stats(&pwr_groups[a]);
            UmbrellaActionStats {
                action: a,
                samples: mc_groups[a].len(),
                mc_mean,
                mc_variance,
                pwr_mean,
                pwr_variance,
            }
        })
        .collect())
}

/// One line of the gradient-check report.
#[derive(Debug, Clone)]
pub struct GradCheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Run every finite-difference suite: all tape ops, then composed K-step
/// metagradients for both pairwise estimators.
pub fn gradcheck_all(op_trials: usize) -> Result<Vec<GradCheckLine>, HarnessError> {
    let mut lines = Vec::new();
    for check in run_op_suite(op_trials, 0x5EED)? {
        lines.push(GradCheckLine {
            name: format!("op/{}", check.name),
            max_rel_err: check.max_rel_err,
            tolerance: 1e-6,
        });
    }

    let env = dag_make(3, 21, 0)?;
    let counts = action_counts(&env);
    let theta0 = Mat::zeros(env.num_states(), env.max_actions());
    let sample_streams = Streams::new(77);
    let phi: Vec<f64> = (0..env.num_states()).map(|s| (s as f64) * 0.07 - 0.4).collect();
    let cfg = InnerConfig {
        optim: OptimConfig::sgd(0.1),
        ..InnerConfig::dag_defaults()
    };
    let mut init_rng = sample_streams.stream(names::INIT, 0);
    let init = TabularActorCritic::random_init(env.num_states(), env.max_actions(), &mut init_rng);
    let eta0 = PairwiseWeightTable::init(
        env.num_states(),
        &mut sample_streams.stream(names::INIT, 1),
    )
    .eta()
    .clone();

    for estimator_name in ["pwr", "pwtd"] {
        for k in [1usize, 2, 4] {
            let batches: Vec<_> = (0..=k)
                .map(|b| {
                    tca_core::agent::sample_batch(
                        &theta0,
                        &env,
                        &counts,
                        4,
                        &sample_streams,
                        (b * 4) as u64,
                    )
                })
                .collect();
            let estimator = find_estimator(estimator_name)?;
            let counts = Arc::clone(&counts);
            let init = init.clone();
            let phi = phi.clone();
            let err = check_gradients(
                move |tape, xs| {
                    let w = tape.sigmoid(xs[0])?;
                    composed_objective_fixed_batches(
                        tape,
                        WeightsNode::Table(w),
                        &init,
                        &phi,
                        &batches,
                        &counts,
                        estimator,
                        &cfg,
                        1.0,
                    )
                    .map_err(|e| match e {
                        tca_core::CoreError::Diff(d) => d,
                        other => panic!("unexpected error in composed objective: {other}"),
                    })
                },
                std::slice::from_ref(&eta0),
                1e-5,
            )?;
            lines.push(GradCheckLine {
                name: format!("metagrad/{estimator_name}/k{k}"),
                max_rel_err: err,
                tolerance: 1e-4,
            });
        }
    }
    Ok(lines)
}
