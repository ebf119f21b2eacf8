//! CLI behavior: exit codes, configuration diagnostics, the non-finite
//! abort path, and the export surfaces.

use std::path::Path;
use std::process::{Command, Output};

use tca_core::envs::dag_make;

fn tca(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tca"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

const GOOD_CONFIG: &str = r#"
[env]
kind = "nested_dag"
depth = 3
env_seed = 1

[method]
name = "h_pwr"

[run]
seeds = [0]
max_episodes = 10000
"#;

#[test]
fn missing_config_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = tca(&["train", "--config", "nope.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_config_reports_line_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.toml", "[env]\nkind = nested_dag\n");
    let out = tca(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "no line diagnostic in: {stderr}");
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.toml", &format!("{GOOD_CONFIG}\n[estimator]\nlamda = 0.9\n"));
    let out = tca(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
}

#[test]
fn unknown_method_override_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cfg.toml", GOOD_CONFIG);
    let out = tca(&["train", "--config", "cfg.toml", "--method", "mystery"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_curve_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cfg.toml", GOOD_CONFIG);
    let out = tca(&["train", "--config", "cfg.toml", "--out", "runs"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = dir.path().join("runs/h_pwr/seed_0/curve.csv");
    let text = std::fs::read_to_string(curve).unwrap();
    assert!(text.starts_with("episode,return,method,seed\n"));
    // Weights for a handcrafted method are the oracle matrix.
    assert!(dir.path().join("runs/h_pwr/seed_0/weights.csv").exists());
    assert!(dir.path().join("runs/h_pwr/seed_0/weights.svg").exists());
    let agent = std::fs::read_to_string(dir.path().join("runs/h_pwr/seed_0/agent.csv")).unwrap();
    assert!(agent.starts_with("state,theta_0,theta_1,psi,phi\n"));
}

#[test]
fn non_finite_run_aborts_with_exit_two_and_last_good_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[env]
kind = "nested_dag"
depth = 3
env_seed = 1

[method]
name = "meta_pwr"

[optimizer]
learning_rate = 1e300

[meta]
outer_updates = 5

[run]
seeds = [0]
"#;
    write(dir.path(), "cfg.toml", cfg);
    let out = tca(&["reset-train", "--config", "cfg.toml", "--out", "runs"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("aborted"), "stderr: {stderr}");
    assert!(
        dir.path().join("runs/meta_pwr/seed_0/weights_last_good.csv").exists(),
        "missing last-good snapshot"
    );
}

#[test]
fn masked_value_probe_runs_through_the_config_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[env]
kind = "nested_dag"
depth = 3
env_seed = 1

[method]
name = "meta_pwtd"

[meta]
outer_updates = 20
value_mask_depth = 3

[run]
seeds = [0]
max_episodes = 10000
"#;
    write(dir.path(), "cfg.toml", cfg);
    let out = tca(&["reset-train", "--config", "cfg.toml", "--out", "probe"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("probe/meta_pwtd/seed_0/weights.csv").exists());
    assert!(dir.path().join("probe/meta_pwtd/seed_0/outer_log.csv").exists());
}

#[test]
fn export_rejects_ragged_matrix() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "ragged.csv", "state,0,1\n0,0.5,0.5\n1,0.5\n");
    let out = tca(
        &["export", "--input", "ragged.csv", "--output", "x.svg", "--kind", "heatmap"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exported_handcrafted_heatmap_paints_the_matched_band() {
    // The depth-8 oracle weights have exactly two unit entries per phase-1
    // state; everything else is zero.
    let dir = tempfile::tempdir().unwrap();
    let env = dag_make(8, 1, 0).unwrap();
    let hc = tca_core::credit::handcrafted_dag(&env);
    let csv = tca_harness::export::matrix_csv(hc.weights());
    write(dir.path(), "hc.csv", &csv);
    let out = tca(
        &["export", "--input", "hc.csv", "--output", "hc.svg", "--kind", "heatmap"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let svg = std::fs::read_to_string(dir.path().join("hc.svg")).unwrap();
    // 30 cells at weight 1 render in the top ramp color.
    assert_eq!(svg.matches("#fde725").count(), 30);
}

#[test]
fn umbrella_demo_without_config_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = tca(&["umbrella-demo", "--episodes", "2000", "--out", "demo"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let report = std::fs::read_to_string(dir.path().join("demo/umbrella_report.csv")).unwrap();
    assert!(report.starts_with("action,samples,mc_mean,mc_variance,pwr_mean,pwr_variance\n"));
    assert_eq!(report.lines().count(), 3);
}

#[test]
fn suite_writes_summary_with_medians() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[env]
kind = "nested_dag"
depth = 3
env_seed = 1

[method]
name = "h_pwr"

[run]
seeds = [0]
methods = ["fixed_lambda", "h_pwr"]
max_episodes = 10000
out_dir = "suite"
"#;
    write(dir.path(), "cfg.toml", cfg);
    let out = tca(&["suite", "--config", "cfg.toml"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("suite/summary.csv")).unwrap();
    assert!(text.contains("fixed_lambda,median,"));
    assert!(text.contains("h_pwr,median,"));
    // One row per (method, seed) plus one median row per method.
    assert_eq!(text.lines().count(), 1 + 2 + 2);
}

#[test]
fn suite_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cfg.toml", GOOD_CONFIG);
    for out in ["a", "b"] {
        let result = tca(&["suite", "--config", "cfg.toml", "--out", out], dir.path());
        assert_eq!(result.status.code(), Some(0));
    }
    let a = std::fs::read(dir.path().join("a/summary.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/summary.csv")).unwrap();
    assert_eq!(a, b);
    let a = std::fs::read(dir.path().join("a/h_pwr/seed_0/curve.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/h_pwr/seed_0/curve.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_method_single_seed_suite_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cfg.toml", GOOD_CONFIG);
    let out = tca(&["suite", "--config", "cfg.toml", "--out", "s"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("s/summary.csv")).unwrap();
    assert_eq!(text.lines().count(), 3, "{text}");
}

#[test]
fn gradcheck_smoke_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = tca(&["gradcheck", "--trials", "3"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max relative error"));
}
