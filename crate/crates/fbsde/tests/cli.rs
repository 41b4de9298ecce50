//! End-to-end runs of the `fbsde` binary on small scenarios.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const LG: &str = r#"
[model]
A = [[-0.5]]
H = [[1.0]]
G = [[1.0]]
f_bar = [1.0]
sigma = 1.0
prior_mean = [0.0]
prior_var = [[1.0]]

[grid]
t_end = 1.0
n_steps = 100
x_min = -6.0
x_max = 6.0
n_points = 121

[estimator]
id = "pi_innovation"
particles = 200

[control]
mode = "lqg_iteration"
terminal_hessian = 1.0
n_runs = 100
"#;

const DOUBLE_WELL: &str = r#"
[model]
drift = "double_well"
sigma = 0.5
h = "linear"
f = "indicator_positive"
prior_mean = 0.0
prior_var = 1.0
G = [[1.0]]

[grid]
t_end = 1.0
n_steps = 100
x_min = -3.0
x_max = 3.0
n_points = 121

[control]
mode = "hjb"
terminal_hessian = 2.0
terminal_center = 1.0
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    fs::write(&p, body).unwrap();
    p
}

fn fbsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsde")).args(args).env("FBSDE_LOG", "off").output().unwrap()
}

fn run_ok(args: &[&str]) {
    let o = fbsde(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = read_table(path);
    let j = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

#[test]
fn simulate_writes_one_row_per_time_point_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), LG);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
    }
    let (header, rows) = read_table(&a.join("obs.csv"));
    assert_eq!(header, ["t", "z_1", "x_1"]);
    assert_eq!(rows.len(), 101);
    assert_eq!(fs::read(a.join("obs.csv")).unwrap(), fs::read(b.join("obs.csv")).unwrap());

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["subcommand"], "simulate");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_model_section_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[grid]\nt_end = 1.0\nn_steps = 10\n");
    let o = fbsde(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model"));
}

#[test]
fn error_estimator_without_truth_column_exits_with_missing_truth() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), LG);
    let sim = tmp.path().join("sim");
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    // Drop the x_1 column.
    let (_, rows) = read_table(&sim.join("obs.csv"));
    let mut body = String::from("t,z_1\n");
    for r in &rows {
        body.push_str(&format!("{},{}\n", r[0], r[1]));
    }
    let obs = tmp.path().join("obs_only.csv");
    fs::write(&obs, body).unwrap();

    let o = fbsde(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--estimator",
        "sigma_obs_error",
        "--obs",
        obs.to_str().unwrap(),
        "--out",
        tmp.path().join("est").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_standard_error_falls_with_particle_count() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), LG);
    let out = tmp.path().join("sweep");
    run_ok(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--estimator",
        "pi_innovation",
        "--particles",
        "100,1000,10000",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let n = column(&out.join("report.csv"), "n_paths");
    let se = column(&out.join("report.csv"), "std_err");
    assert_eq!(n, [100.0, 1000.0, 10000.0]);
    assert!(se[0] > se[1] && se[1] > se[2], "std_err {se:?}");
}

#[test]
fn lqg_iteration_gains_match_riccati() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), LG);
    let out = tmp.path().join("lqg");
    run_ok(&["control", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let gains = out.join("gains.csv");
    let k = column(&gains, "K_11");
    let r = column(&gains, "riccati_K_11");
    assert_eq!(k.len(), r.len());
    let gap = k.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-6, "gain gap {gap}");
    assert!(!column(&out.join("convergence.csv"), "max_gain_change").is_empty());
}

#[test]
fn certainty_equivalence_writes_a_cost_table() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), LG);
    let out = tmp.path().join("ce");
    run_ok(&[
        "control",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "certainty_equivalence",
        "--out",
        out.to_str().unwrap(),
    ]);
    let costs = column(&out.join("costs.csv"), "realized_cost");
    assert_eq!(costs.len(), 100);
    assert!(costs.iter().all(|c| c.is_finite() && *c >= 0.0));
    let (header, rows) = read_table(&out.join("costs.csv"));
    let seed = header.iter().position(|h| h == "seed").unwrap();
    let mut seeds: Vec<&str> = rows.iter().map(|r| r[seed].as_str()).collect();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), 100);
    // One row per time point; no control is applied at the final time.
    let (_, trace) = read_table(&out.join("trace.csv"));
    assert_eq!(trace.len(), 101);
    assert!(trace[100][2].is_empty());
    assert!(trace[..100].iter().all(|r| r[2].parse::<f64>().is_ok()));
}

#[test]
fn hjb_policy_is_written_on_the_space_time_grid() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), DOUBLE_WELL);
    let out = tmp.path().join("hjb");
    run_ok(&["control", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let (header, rows) = read_table(&out.join("policy.csv"));
    assert_eq!(header.len(), 1 + 121);
    assert_eq!(rows.len(), 101);
    let first: Vec<f64> = rows[0][1..].iter().map(|v| v.parse().unwrap()).collect();
    assert!(first.iter().all(|v| v.is_finite()));
    // Mass at x < 0 is pushed towards the right well.
    let x: Vec<f64> = header[1..].iter().map(|v| v.parse().unwrap()).collect();
    let j = x.iter().position(|&xi| xi >= -1.0).unwrap();
    assert!(first[j] > 0.0);
}
