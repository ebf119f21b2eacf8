//! The method registry: each experiment method (baseline or meta-learned)
//! lives behind one trait and is selected by name at runtime.

use std::time::Instant;

use tca_core::agent::TabularActorCritic;
use tca_core::credit::find_estimator;
use tca_core::diffmath::Mat;
use tca_core::envs::{dag_mask_values, dag_optimal_values};
use tca_core::metaloop::{freeze_and_evaluate_with_agent, OuterObjectiveRecord};
use tca_core::rng::Streams;

use crate::config::ExperimentConfig;
use crate::runner::{online_train, reset_train};
use crate::HarnessError;

/// One run's inputs: the resolved config plus the seed it executes under.
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed: u64,
}

impl RunContext<'_> {
    /// Streams for frozen-weight evaluation. Shared across methods so that
    /// per-seed comparisons are paired (identical environment randomness).
    pub fn eval_streams(&self) -> Streams {
        Streams::new(self.seed).child("eval", 0)
    }

    /// Streams for meta training, disjoint from evaluation.
    pub fn train_streams(&self) -> Streams {
        Streams::new(self.seed).child("meta-train", 0)
    }
}

/// Everything a method run produces.
pub struct MethodRun {
    pub returns: Vec<f64>,
    pub episodes_to_threshold: Option<usize>,
    pub wall_clock_secs: f64,
    /// Final pairwise weight matrix, when the method has one.
    pub weights: Option<Mat>,
    pub outer_log: Vec<OuterObjectiveRecord>,
    /// (outer step, weight matrix) snapshots taken during meta training.
    pub snapshots: Vec<(usize, Mat)>,
    /// Final agent tables (theta, psi, phi), when a policy was trained.
    pub agent: Option<TabularActorCritic>,
}

/// An experiment method. `evaluate` produces the frozen-weight learning-speed
/// measurement (training weights first if the method learns them);
/// `train_online` runs the method's online training protocol.
pub trait Method: Send + Sync {
    fn name(&self) -> &'static str;

    fn evaluate(&self, ctx: &RunContext) -> Result<MethodRun, HarnessError>;

    fn train_online(&self, ctx: &RunContext) -> Result<MethodRun, HarnessError>;
}

fn frozen_run(
    ctx: &RunContext,
    estimator_name: &str,
    weights: Option<&Mat>,
    stop_at_threshold: bool,
) -> Result<MethodRun, HarnessError> {
    let start = Instant::now();
    let (metrics, agent) = freeze_and_evaluate_with_agent(
        ctx.cfg.env.mdp(),
        find_estimator(estimator_name)?,
        weights,
        &ctx.cfg.inner,
        &ctx.cfg.freeze_config(stop_at_threshold),
        &ctx.eval_streams(),
    )?;
    Ok(MethodRun {
        returns: metrics.returns,
        episodes_to_threshold: metrics.episodes_to_threshold,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        weights: weights.cloned(),
        outer_log: Vec::new(),
        snapshots: Vec::new(),
        agent: Some(agent),
    })
}

/// Actor-critic with the plain lambda estimator (lambda from config).
struct FixedLambda;

impl Method for FixedLambda {
    fn name(&self) -> &'static str {
        "fixed_lambda"
    }

    fn evaluate(&self, ctx: &RunContext) -> Result<MethodRun, HarnessError> {
        frozen_run(ctx, "lambda", None, true)
    }

    fn train_online(&self, ctx: &RunContext) -> Result<MethodRun, HarnessError> {
        frozen_run(ctx, "lambda", None, false)
    }
}

/// Pairwise-weighted rewards with the environment's oracle weights.
struct HandcraftedPwr;

impl Method for HandcraftedPwr {
    fn name(&self) -> &'static str {
        "h_pwr"
    }

    fn evaluate(&self, ctx: &RunContext) -> Result<MethodRun, HarnessError> {
        let hw = ctx.cfg.env.handcrafted();
        frozen_run(ctx, "pwr", Some(hw.weights()), true)
    }

    fn train_online(&self, ctx: &RunContext) -> Result<MethodRun, HarnessError> {
        let hw = ctx.cfg.env.handcrafted();
        frozen_run(ctx, "pwr", Some(hw.weights()), false)
    }
}

/// The optional pinned value table for the masked-value probe.
fn value_override(ctx: &RunContext) -> Result<Option<Vec<f64>>, HarnessError> {
    match ctx.cfg.value_mask_depth {
        None => Ok(None),
        Some(d) => {
            let dag = ctx
                .cfg
                .env
                .dag()
                .ok_or_else(|| HarnessError::Runtime("value mask requires nested_dag".into()))?;
            let optimal = dag_optimal_values(dag);
            Ok(Some(dag_mask_values(&optimal, dag, d)?))
        }
    }
}

fn meta_method_evaluate(ctx: &RunContext, estimator_name: &str) -> Result<MethodRun, HarnessError> {
    let start = Instant::now();
    let trained = reset_train(
        ctx.cfg,
        estimator_name,
        &ctx.train_streams(),
        value_override(ctx)?.as_deref(),
    )?;
    let learned = trained.weights.weights();
    let mut run = frozen_run(ctx, estimator_name, Some(&learned), true)?;
    run.wall_clock_secs = start.elapsed().as_secs_f64();
    run.outer_log = trained.log;
    run.snapshots = trained.snapshots;
    Ok(run)
}

/// Metagradient-learned reward weights.
struct MetaPwr;

impl Method for MetaPwr {
    fn name(&self) -> &'static str {
        "meta_pwr"
    }

    fn evaluate(&self, ctx: &RunContext) -> Result<MethodRun, HarnessError> {
        meta_method_evaluate(ctx, "pwr")
    }

    fn train_online(&self, ctx: &RunContext) -> Result<MethodRun, HarnessError> {
        online_train(ctx.cfg, "pwr", &ctx.train_streams())
    }
}

/// Metagradient-learned TD-error weights.
struct MetaPwtd;

impl Method for MetaPwtd {
    fn name(&self) -> &'static str {
        "meta_pwtd"
    }

    fn evaluate(&self, ctx: &RunContext) -> Result<MethodRun, HarnessError> {
        meta_method_evaluate(ctx, "pwtd")
    }

    fn train_online(&self, ctx: &RunContext) -> Result<MethodRun, HarnessError> {
        online_train(ctx.cfg, "pwtd", &ctx.train_streams())
    }
}

static METHODS: [&dyn Method; 4] = [&FixedLambda, &HandcraftedPwr, &MetaPwr, &MetaPwtd];

pub fn methods() -> &'static [&'static dyn Method] {
    &METHODS
}

pub fn method_names() -> Vec<&'static str> {
    METHODS.iter().map(|m| m.name()).collect()
}

pub fn find_method(name: &str) -> Result<&'static dyn Method, HarnessError> {
    METHODS
        .iter()
        .find(|m| m.name() == name)
        .copied()
        .ok_or_else(|| {
            HarnessError::Runtime(format!(
                "unknown method '{name}' (known: {})",
                method_names().join(", ")
            ))
        })
}

/// The estimator a method's weight files apply to (for eval-weights).
pub fn estimator_for_weights(method: &str) -> Result<&'static str, HarnessError> {
    match method {
        "h_pwr" | "meta_pwr" => Ok("pwr"),
        "meta_pwtd" => Ok("pwtd"),
        other => Err(HarnessError::Runtime(format!(
            "method '{other}' does not evaluate external weight files"
        ))),
    }
}
