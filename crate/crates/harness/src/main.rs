//! `tca`: train and evaluate pairwise-weighted credit assignment methods on
//! tabular environments, learn weight tables via the metagradient outer
//! loop, and export results as CSV and SVG.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tca_core::credit::find_estimator;
use tca_core::envs::umbrella_make;
use tca_core::metaloop::freeze_and_evaluate;

use tca_harness::config::{load_config, ExperimentConfig, Overrides};
use tca_harness::export;
use tca_harness::methods::{estimator_for_weights, find_method, MethodRun, RunContext};
use tca_harness::runner;
use tca_harness::HarnessError;

#[derive(Parser)]
#[command(name = "tca", version, about = "Pairwise-weighted temporal credit assignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct CommonRunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method override.
    #[arg(long)]
    method: Option<String>,
    /// Write a weight snapshot every K outer updates.
    #[arg(long = "snapshot-every")]
    snapshot_every: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Heatmap,
    Curve,
}

#[derive(Subcommand)]
enum Command {
    /// Online-mode training for each configured seed.
    Train(CommonRunArgs),
    /// Reset-mode meta training, then frozen-weight evaluation.
    ResetTrain(CommonRunArgs),
    /// Evaluate a weight matrix from a CSV file with frozen weights.
    EvalWeights {
        #[command(flatten)]
        common: CommonRunArgs,
        /// Weight matrix CSV (matrix schema with a state-id header row).
        #[arg(long)]
        weights: PathBuf,
    },
    /// First-action advantage variance on the umbrella chain: Monte-Carlo
    /// versus handcrafted pairwise weights.
    UmbrellaDemo {
        /// Optional config providing an umbrella environment.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Episodes to sample.
        #[arg(long, default_value_t = 10_000)]
        episodes: usize,
    },
    /// Finite-difference gradient checks for every tape op and the composed
    /// metagradient chain.
    Gradcheck {
        /// Random trials per op.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Render a CSV artifact as SVG.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        kind: ExportKind,
        /// Reachability mask CSV; unreachable pairs render white.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Smoothing window for curves.
        #[arg(long, default_value_t = 100)]
        window: usize,
    },
    /// Evaluate every configured method over every seed with paired
    /// environment streams and write the comparison summary.
    Suite(CommonRunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn overrides(args: &CommonRunArgs) -> Overrides {
    Overrides {
        seed: args.seed,
        out_dir: args.out.clone(),
        method: args.method.clone(),
        snapshot_every: args.snapshot_every,
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args.config, &overrides(&args))?;
            run_per_seed(&cfg, |ctx| find_method(&cfg.method)?.train_online(ctx))
        }
        Command::ResetTrain(args) => {
            let cfg = load_config(&args.config, &overrides(&args))?;
            run_per_seed(&cfg, |ctx| find_method(&cfg.method)?.evaluate(ctx))
        }
        Command::EvalWeights { common, weights } => {
            let cfg = load_config(&common.config, &overrides(&common))?;
            let matrix = export::read_matrix_csv(&weights)?;
            let estimator = find_estimator(estimator_for_weights(&cfg.method)?)?;
            for &seed in &cfg.seeds {
                let ctx = RunContext { cfg: &cfg, seed };
                let metrics = freeze_and_evaluate(
                    cfg.env.mdp(),
                    estimator,
                    Some(&matrix),
                    &cfg.inner,
                    &cfg.freeze_config(true),
                    &ctx.eval_streams(),
                )?;
                let dir = run_dir(&cfg, seed);
                export::write_curve_csv(&dir.join("curve.csv"), &metrics.returns, &cfg.method, seed)?;
                println!(
                    "eval-weights method={} seed={seed} episodes_to_threshold={}",
                    cfg.method,
                    metrics
                        .episodes_to_threshold
                        .map(|e| e.to_string())
                        .unwrap_or_else(|| "none".into()),
                );
            }
            Ok(())
        }
        Command::UmbrellaDemo { config, out, episodes } => {
            let (env, out_dir) = match config {
                Some(path) => {
                    let cfg = load_config(&path, &Overrides { out_dir: out, ..Default::default() })?;
                    match cfg.env {
                        tca_harness::config::EnvHandle::Umbrella(ref e) => {
                            (e.clone(), cfg.out_dir.clone())
                        }
                        _ => {
                            return Err(HarnessError::Runtime(
                                "umbrella-demo needs an umbrella environment".into(),
                            ))
                        }
                    }
                }
                None => (
                    umbrella_make(20, 0.0, 5.0, 0)?,
                    out.unwrap_or_else(|| PathBuf::from("out")),
                ),
            };
            let stats = runner::umbrella_demo(&env, episodes, 0)?;
            let path = out_dir.join("umbrella_report.csv");
            export::write_text(&path, &export::umbrella_report_csv(&stats))?;
            println!("action samples       mc_var      pwr_var      mc_mean     pwr_mean");
            for s in &stats {
                println!(
                    "{:>6} {:>7} {:>12.4} {:>12.4e} {:>12.4} {:>12.4}",
                    s.action, s.samples, s.mc_variance, s.pwr_variance, s.mc_mean, s.pwr_mean
                );
            }
            println!("report written to {}", path.display());
            Ok(())
        }
        Command::Gradcheck { trials } => {
            let lines = runner::gradcheck_all(trials)?;
            let mut worst: f64 = 0.0;
            let mut all_ok = true;
            for line in &lines {
                let status = if line.passed() { "ok" } else { "FAIL" };
                println!("{:<24} max_rel_err {:>12.3e}  tol {:>8.0e}  {status}", line.name, line.max_rel_err, line.tolerance);
                worst = worst.max(line.max_rel_err);
                all_ok &= line.passed();
            }
            println!("max relative error over all suites: {worst:.3e}");
            if all_ok {
                Ok(())
            } else {
                Err(HarnessError::Runtime("gradient check failed".into()))
            }
        }
        Command::Export { input, output, kind, mask, window } => {
            let text = std::fs::read_to_string(&input)?;
            let svg = match kind {
                ExportKind::Heatmap => {
                    let m = export::parse_matrix_csv(&text)?;
                    let mask = mask.map(|p| export::read_matrix_csv(&p)).transpose()?;
                    export::heatmap_svg(&m, mask.as_ref())?
                }
                ExportKind::Curve => {
                    let groups = export::parse_curve_csv(&text)?;
                    export::curves_svg(&groups, window.max(1))?
                }
            };
            export::write_text(&output, &svg)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Suite(args) => {
            let cfg = load_config(&args.config, &overrides(&args))?;
            let summary = runner::run_suite(&cfg, &cfg.suite_methods)?;
            let path = cfg.out_dir.join("summary.csv");
            export::write_summary_csv(&path, &summary)?;
            for (row, run) in summary.rows.iter().zip(&summary.runs) {
                let dir = cfg.out_dir.join(&row.method).join(format!("seed_{}", row.seed));
                export::write_curve_csv(&dir.join("curve.csv"), &run.returns, &row.method, row.seed)?;
                write_run_artifacts(&cfg, &dir, run)?;
            }
            for (method, median) in &summary.medians {
                println!("{method}: median episodes to threshold = {median}");
            }
            println!("summary written to {}", path.display());
            Ok(())
        }
    }
}

fn run_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(&cfg.method).join(format!("seed_{seed}"))
}

fn write_run_artifacts(
    cfg: &ExperimentConfig,
    dir: &Path,
    run: &MethodRun,
) -> Result<(), HarnessError> {
    if let Some(w) = &run.weights {
        export::write_matrix_csv(&dir.join("weights.csv"), w)?;
        let reach = cfg.env.reachable_pairs();
        export::write_text(&dir.join("reachability.csv"), &export::reachability_csv(&reach))?;
        let mask = export::parse_matrix_csv(&export::reachability_csv(&reach))?;
        export::write_text(&dir.join("weights.svg"), &export::heatmap_svg(w, Some(&mask))?)?;
    }
    if !run.outer_log.is_empty() {
        export::write_outer_log_csv(&dir.join("outer_log.csv"), &run.outer_log)?;
    }
    for (step, snap) in &run.snapshots {
        export::write_matrix_csv(&dir.join("snapshots").join(format!("step_{step}.csv")), snap)?;
    }
    if let Some(agent) = &run.agent {
        export::write_text(&dir.join("agent.csv"), &export::agent_csv(agent))?;
    }
    Ok(())
}

fn run_per_seed(
    cfg: &ExperimentConfig,
    run_one: impl Fn(&RunContext) -> Result<MethodRun, HarnessError>,
) -> Result<(), HarnessError> {
    for &seed in &cfg.seeds {
        let ctx = RunContext { cfg, seed };
        let dir = run_dir(cfg, seed);
        let run = match run_one(&ctx) {
            Ok(run) => run,
            Err(HarnessError::Abort { message, last_good_weights }) => {
                if let Some(w) = &last_good_weights {
                    let path = dir.join("weights_last_good.csv");
                    export::write_matrix_csv(&path, w)?;
                    eprintln!("last good weights written to {}", path.display());
                }
                return Err(HarnessError::Abort { message, last_good_weights: None });
            }
            Err(e) => return Err(e),
        };
        export::write_curve_csv(&dir.join("curve.csv"), &run.returns, &cfg.method, seed)?;
        write_run_artifacts(cfg, &dir, &run)?;
        println!(
            "method={} seed={seed} episodes={} episodes_to_threshold={} wall_clock={:.1}s",
            cfg.method,
            run.returns.len(),
            run.episodes_to_threshold
                .map(|e| e.to_string())
                .unwrap_or_else(|| "none".into()),
            run.wall_clock_secs,
        );
    }
    Ok(())
}
