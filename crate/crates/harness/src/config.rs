//! Experiment configuration.
//!
//! Config files are TOML with one table per concern. Unknown keys are hard
//! errors, as are keys that do not apply to the configured environment kind;
//! everything is validated before any run starts.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use tca_core::agent::{InnerConfig, OptimConfig, OptimKind};
use tca_core::credit::{handcrafted_dag, handcrafted_umbrella, HandcraftedWeights};
use tca_core::envs::{
    dag_make, dag_reachable_pairs, umbrella_make, EpisodicMdp, NestedDag, NoiseKind, UmbrellaChain,
};
use tca_core::metaloop::{FreezeConfig, MetaConfig, MetaMode};

use crate::HarnessError;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    env: EnvSection,
    method: MethodSection,
    #[serde(default)]
    estimator: EstimatorSection,
    #[serde(default)]
    optimizer: OptimizerSection,
    #[serde(default)]
    meta: MetaSection,
    #[serde(default)]
    run: RunSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvSection {
    kind: String,
    #[serde(default)]
    env_seed: u64,
    // nested_dag
    depth: Option<usize>,
    reveal_padding: Option<usize>,
    // umbrella
    length: Option<usize>,
    noise_mean: Option<f64>,
    noise_std: Option<f64>,
    final_reward_magnitude: Option<f64>,
    target_action: Option<usize>,
    noise: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodSection {
    name: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EstimatorSection {
    gamma: f64,
    lambda: f64,
    entropy_coef: f64,
    standardize_advantages: bool,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        EstimatorSection {
            gamma: 1.0,
            lambda: 1.0,
            entropy_coef: 0.001,
            standardize_advantages: false,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct OptimizerSection {
    kind: String,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            kind: "adam".into(),
            learning_rate: 0.01,
            beta1: 0.0,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct MetaSection {
    mode: String,
    inner_updates_per_outer: usize,
    outer_updates: usize,
    outer_learning_rate: f64,
    outer_lambda: f64,
    clip_norm: f64,
    value_mask_depth: Option<usize>,
}

impl Default for MetaSection {
    fn default() -> Self {
        MetaSection {
            mode: "reset".into(),
            inner_updates_per_outer: 16,
            outer_updates: 2000,
            outer_learning_rate: 0.01,
            outer_lambda: 1.0,
            clip_norm: 0.5,
            value_mask_depth: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunSection {
    seeds: Vec<u64>,
    batch_size: usize,
    max_episodes: usize,
    threshold_fraction: f64,
    threshold_window: usize,
    snapshot_every: usize,
    out_dir: String,
    /// Methods compared by the suite command; defaults to the single
    /// configured method.
    methods: Vec<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![0],
            batch_size: 8,
            max_episodes: 100_000,
            threshold_fraction: 0.95,
            threshold_window: 100,
            snapshot_every: 0,
            out_dir: "out".into(),
            methods: Vec::new(),
        }
    }
}

/// The environment, as configured.
#[derive(Debug, Clone)]
pub enum EnvHandle {
    Umbrella(UmbrellaChain),
    Dag(NestedDag),
}

impl EnvHandle {
    pub fn mdp(&self) -> &dyn EpisodicMdp {
        match self {
            EnvHandle::Umbrella(e) => e,
            EnvHandle::Dag(e) => e,
        }
    }

    pub fn dag(&self) -> Option<&NestedDag> {
        match self {
            EnvHandle::Dag(e) => Some(e),
            EnvHandle::Umbrella(_) => None,
        }
    }

    /// Oracle pairwise weights for this environment.
    pub fn handcrafted(&self) -> HandcraftedWeights {
        match self {
            EnvHandle::Umbrella(e) => handcrafted_umbrella(e),
            EnvHandle::Dag(e) => handcrafted_dag(e),
        }
    }

    /// Ordered state-pair reachability (row visited strictly before column).
    pub fn reachable_pairs(&self) -> Vec<Vec<bool>> {
        match self {
            EnvHandle::Dag(e) => dag_reachable_pairs(e),
            EnvHandle::Umbrella(e) => {
                let n = e.num_states();
                (0..n).map(|i| (0..n).map(|j| j > i).collect()).collect()
            }
        }
    }
}

/// A fully validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: EnvHandle,
    pub env_seed: u64,
    pub method: String,
    pub inner: InnerConfig,
    pub meta: MetaConfig,
    pub value_mask_depth: Option<usize>,
    pub seeds: Vec<u64>,
    /// Methods compared by the suite command.
    pub suite_methods: Vec<String>,
    pub max_episodes: usize,
    pub threshold_fraction: f64,
    pub threshold_window: usize,
    pub snapshot_every: usize,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn freeze_config(&self, stop_at_threshold: bool) -> FreezeConfig {
        FreezeConfig {
            max_episodes: self.max_episodes,
            threshold_fraction: self.threshold_fraction,
            threshold_window: self.threshold_window,
            stop_at_threshold,
        }
    }
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub method: Option<String>,
    pub snapshot_every: Option<usize>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let file: ConfigFile = toml::from_str(&text)
        .map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source: Box::new(source) })?;
    let cfg = resolve(file, overrides)?;
    Ok(cfg)
}

fn resolve(file: ConfigFile, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let env = build_env(&file.env)?;

    let method = overrides.method.clone().unwrap_or(file.method.name);
    if crate::methods::find_method(&method).is_err() {
        return Err(invalid(format!(
            "unknown method '{method}' (known: {})",
            crate::methods::method_names().join(", ")
        )));
    }

    let est = &file.estimator;
    if !(0.0..=1.0).contains(&est.lambda) {
        return Err(invalid(format!("estimator.lambda must be in [0, 1], got {}", est.lambda)));
    }
    if !(0.0..=1.0).contains(&est.gamma) {
        return Err(invalid(format!("estimator.gamma must be in [0, 1], got {}", est.gamma)));
    }
    if est.entropy_coef < 0.0 {
        return Err(invalid("estimator.entropy_coef must be >= 0"));
    }

    let opt = &file.optimizer;
    if opt.learning_rate < 0.0 || !opt.learning_rate.is_finite() {
        return Err(invalid("optimizer.learning_rate must be finite and >= 0"));
    }
    let optim = match opt.kind.as_str() {
        "sgd" => OptimConfig { kind: OptimKind::Sgd, learning_rate: opt.learning_rate },
        "adam" => OptimConfig {
            kind: OptimKind::Adam { beta1: opt.beta1, beta2: opt.beta2, epsilon: opt.epsilon },
            learning_rate: opt.learning_rate,
        },
        other => return Err(invalid(format!("optimizer.kind must be sgd or adam, got '{other}'"))),
    };

    let run = &file.run;
    if run.seeds.is_empty() {
        return Err(invalid("run.seeds must not be empty"));
    }
    if run.batch_size < 1 {
        return Err(invalid("run.batch_size must be >= 1"));
    }
    if !(run.threshold_fraction > 0.0 && run.threshold_fraction <= 1.0) {
        return Err(invalid("run.threshold_fraction must be in (0, 1]"));
    }
    if run.threshold_window < 1 {
        return Err(invalid("run.threshold_window must be >= 1"));
    }

    let meta_sec = &file.meta;
    let mode = match meta_sec.mode.as_str() {
        "reset" => MetaMode::Reset,
        "online" => MetaMode::Online,
        other => return Err(invalid(format!("meta.mode must be reset or online, got '{other}'"))),
    };
    let meta = MetaConfig {
        mode,
        inner_updates_per_outer: meta_sec.inner_updates_per_outer,
        outer_updates: meta_sec.outer_updates,
        outer_optim: OptimConfig {
            kind: optim.kind,
            learning_rate: meta_sec.outer_learning_rate,
        },
        outer_lambda: meta_sec.outer_lambda,
        clip_norm: meta_sec.clip_norm,
    };
    meta.validate().map_err(|e| invalid(e.to_string()))?;

    if let Some(d) = meta_sec.value_mask_depth {
        match &env {
            EnvHandle::Dag(dag) => {
                if d > dag.depth() {
                    return Err(invalid(format!(
                        "meta.value_mask_depth {d} out of range 0..={}",
                        dag.depth()
                    )));
                }
            }
            EnvHandle::Umbrella(_) => {
                return Err(invalid("meta.value_mask_depth only applies to nested_dag"));
            }
        }
    }

    let inner = InnerConfig {
        gamma: est.gamma,
        lambda: est.lambda,
        entropy_coef: est.entropy_coef,
        batch_size: run.batch_size,
        standardize_advantages: est.standardize_advantages,
        optim,
    };

    let seeds = match overrides.seed {
        Some(s) => vec![s],
        None => run.seeds.clone(),
    };

    let suite_methods = if run.methods.is_empty() {
        vec![method.clone()]
    } else {
        for m in &run.methods {
            if crate::methods::find_method(m).is_err() {
                return Err(invalid(format!(
                    "unknown method '{m}' in run.methods (known: {})",
                    crate::methods::method_names().join(", ")
                )));
            }
        }
        run.methods.clone()
    };

    Ok(ExperimentConfig {
        env,
        env_seed: file.env.env_seed,
        method,
        inner,
        meta,
        value_mask_depth: meta_sec.value_mask_depth,
        seeds,
        suite_methods,
        max_episodes: run.max_episodes,
        threshold_fraction: run.threshold_fraction,
        threshold_window: run.threshold_window,
        snapshot_every: overrides.snapshot_every.unwrap_or(run.snapshot_every),
        out_dir: overrides.out_dir.clone().unwrap_or_else(|| PathBuf::from(&run.out_dir)),
    })
}

fn build_env(env: &EnvSection) -> Result<EnvHandle, ConfigError> {
    match env.kind.as_str() {
        "nested_dag" => {
            for (key, set) in [
                ("length", env.length.is_some()),
                ("noise_mean", env.noise_mean.is_some()),
                ("noise_std", env.noise_std.is_some()),
                ("final_reward_magnitude", env.final_reward_magnitude.is_some()),
                ("target_action", env.target_action.is_some()),
                ("noise", env.noise.is_some()),
            ] {
                if set {
                    return Err(invalid(format!("env.{key} does not apply to nested_dag")));
                }
            }
            let depth = env.depth.ok_or_else(|| invalid("env.depth is required for nested_dag"))?;
            let dag = dag_make(depth, env.env_seed, env.reveal_padding.unwrap_or(0))
                .map_err(|e| invalid(e.to_string()))?;
            Ok(EnvHandle::Dag(dag))
        }
        "umbrella" => {
            for (key, set) in [
                ("depth", env.depth.is_some()),
                ("reveal_padding", env.reveal_padding.is_some()),
            ] {
                if set {
                    return Err(invalid(format!("env.{key} does not apply to umbrella")));
                }
            }
            let length = env.length.ok_or_else(|| invalid("env.length is required for umbrella"))?;
            let chain = umbrella_make(
                length,
                env.noise_mean.unwrap_or(0.0),
                env.noise_std.unwrap_or(1.0),
                env.target_action.unwrap_or(0),
            )
            .map_err(|e| invalid(e.to_string()))?
            .with_final_reward_magnitude(env.final_reward_magnitude.unwrap_or(1.0));
            let chain = match env.noise.as_deref() {
                None | Some("gaussian") => chain,
                Some("two_point") => chain.with_noise_kind(NoiseKind::TwoPoint),
                Some(other) => {
                    return Err(invalid(format!(
                        "env.noise must be gaussian or two_point, got '{other}'"
                    )))
                }
            };
            Ok(EnvHandle::Umbrella(chain))
        }
        other => Err(invalid(format!("env.kind must be umbrella or nested_dag, got '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let file: ConfigFile = toml::from_str(text).expect("syntactically valid");
        resolve(file, &Overrides::default())
    }

    const MINIMAL: &str = r#"
[env]
kind = "nested_dag"
depth = 4

[method]
name = "h_pwr"
"#;

    #[test]
    fn minimal_config_uses_documented_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.inner.batch_size, 8);
        assert_eq!(cfg.inner.entropy_coef, 0.001);
        assert_eq!(cfg.inner.gamma, 1.0);
        assert_eq!(cfg.meta.inner_updates_per_outer, 16);
        assert_eq!(cfg.meta.outer_updates, 2000);
        assert_eq!(cfg.meta.clip_norm, 0.5);
        assert_eq!(cfg.threshold_fraction, 0.95);
        assert_eq!(cfg.threshold_window, 100);
        match cfg.inner.optim.kind {
            OptimKind::Adam { beta1, beta2, epsilon } => {
                assert_eq!(beta1, 0.0);
                assert_eq!(beta2, 0.999);
                assert_eq!(epsilon, 1e-8);
            }
            _ => panic!("expected adam"),
        }
        assert_eq!(cfg.inner.optim.learning_rate, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[run]\ntypo_key = 3\n");
        let err = toml::from_str::<ConfigFile>(&text).unwrap_err();
        assert!(err.to_string().contains("typo_key"), "{err}");
    }

    #[test]
    fn wrong_kind_fields_are_rejected() {
        let text = r#"
[env]
kind = "nested_dag"
depth = 4
noise_std = 3.0

[method]
name = "h_pwr"
"#;
        let err = parse(text).unwrap_err();
        assert!(err.to_string().contains("noise_std"), "{err}");
    }

    #[test]
    fn unknown_method_rejected() {
        let text = r#"
[env]
kind = "nested_dag"
depth = 4

[method]
name = "mystery"
"#;
        let err = parse(text).unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn mask_depth_requires_dag_and_range() {
        let text = r#"
[env]
kind = "nested_dag"
depth = 4

[method]
name = "meta_pwtd"

[meta]
value_mask_depth = 5
"#;
        assert!(parse(text).is_err());
        let text = r#"
[env]
kind = "umbrella"
length = 10

[method]
name = "meta_pwtd"

[meta]
value_mask_depth = 1
"#;
        assert!(parse(text).is_err());
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        let text = r#"
[env]
kind = "nested_dag"
depth = 4

[method]
name = "fixed_lambda"

[estimator]
lambda = 1.5
"#;
        assert!(parse(text).is_err());
    }
}
