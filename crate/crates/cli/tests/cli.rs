use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SCALAR: &str = r#"
[dims]
n = 1
d = 1
[grid]
T = 1.0
K = 200
[coefficients]
F = 0
G = 1
N = 1
M = 1
[ensemble]
points = [[-1.0], [2.0], [0.5]]
weights = [1.0, 2.0, 1.0]
[noise]
eta = 1.0
paths = 50
seed = 5
"#;

fn mfckit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfckit"))
        .args(args)
        .env_remove("MFCKIT_SEED")
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn problem(dir: &Path, text: &str) -> String {
    let path = dir.join("problem.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn solve(dir: &Path, file: &str, method: &str, extra: &[&str]) -> Output {
    let out = dir.join(method);
    let mut args = vec!["solve", file, "--method", method, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    mfckit(&args)
}

#[test]
fn cos_summary_matches_scalar_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let file = problem(dir.path(), SCALAR);
    let out = solve(dir.path(), &file, "cos", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&dir.path().join("cos/summary.json"));
    // Weighted second moment (1 + 8 + 0.25) / 4.
    let want = 0.5 * 1.0f64.tanh() * (9.25 / 4.0);
    let got = s["value_closed_form"].as_f64().unwrap();
    // RK4 on the Riccati flow at K = 200 is good to about 1e-11.
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert!((s["cost"].as_f64().unwrap() - want).abs() < 1e-8);
    assert_eq!(s["manifest"]["command"], "solve --method cos");

    let csv = fs::read_to_string(dir.path().join("cos/trajectories.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("node_time,particle_id,x_0,v_0"));
    assert_eq!(lines.count(), 201 * 3);
}

#[test]
fn kernel_and_cos_costs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let file = problem(dir.path(), SCALAR);
    for m in ["cos", "kernel"] {
        assert!(solve(dir.path(), &file, m, &[]).status.success());
    }
    let a = json(&dir.path().join("cos/summary.json"))["cost"].as_f64().unwrap();
    let b = json(&dir.path().join("kernel/summary.json"))["cost"].as_f64().unwrap();
    assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
}

#[test]
fn stochastic_paths_follow_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let file = problem(dir.path(), SCALAR);
    let run = |tag: &str, seed: &str| {
        let out = dir.path().join(tag);
        let o = mfckit(&["solve", &file, "--method", "stochastic", "--out", out.to_str().unwrap(), "--seed", seed, "--paths", "20"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("paths.csv")).unwrap()
    };
    let a = run("a", "9");
    assert_eq!(a, run("b", "9"));
    assert_ne!(a, run("c", "10"));
    assert_eq!(a.lines().next(), Some("path_id,node_time,particle_id,x_0"));
    assert_eq!(a.lines().count(), 1 + 20 * 201 * 3);
    let s = json(&dir.path().join("a/summary.json"));
    assert_eq!(s["n_paths"], 20);
    assert_eq!(s["seed"], 9);
    assert_eq!(s["manifest"]["seed"], 9);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let file = problem(dir.path(), SCALAR);
    let out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_mfckit"))
        .args(["solve", &file, "--method", "stochastic", "--paths", "3", "--out", out.to_str().unwrap()])
        .env("MFCKIT_SEED", "77")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(json(&out.join("summary.json"))["seed"], 77);
}

#[test]
fn kernel_stochastic_writes_controls() {
    let dir = tempfile::tempdir().unwrap();
    let file = problem(dir.path(), SCALAR);
    let o = solve(dir.path(), &file, "kernel-stochastic", &["--paths", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("kernel-stochastic/paths.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("path_id,node_time,particle_id,x_0,v_0"));
    assert_eq!(csv.lines().count(), 1 + 4 * 201 * 3);
    let s = json(&dir.path().join("kernel-stochastic/summary.json"));
    assert_eq!(s["path_costs"].as_array().unwrap().len(), 4);
}

#[test]
fn missing_file_exits_66() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfckit(&["solve", "/definitely/not/here.toml", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(66));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not/here.toml"));
}

#[test]
fn unknown_method_exits_64() {
    let dir = tempfile::tempdir().unwrap();
    let file = problem(dir.path(), SCALAR);
    let o = mfckit(&["solve", &file, "--method", "magic"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(o.stdout.is_empty());
}

#[test]
fn invalid_problem_exits_2_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let file = problem(dir.path(), &SCALAR.replace("N = 1", "N = -1"));
    let o = solve(dir.path(), &file, "cos", &[]);
    assert_eq!(o.status.code(), Some(2));
    let d = json(&dir.path().join("cos/diagnostics.json"));
    assert_eq!(d["error_kind"], "validation");
    assert_eq!(d["details"]["violations"][0]["constraint"], "N not PD");
}

#[test]
fn shape_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let file = problem(dir.path(), &SCALAR.replace("G = 1", "G = [[1.0, 2.0]]"));
    let o = solve(dir.path(), &file, "cos", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(json(&dir.path().join("cos/diagnostics.json"))["error_kind"], "dimension");
}

#[test]
fn stochastic_without_noise_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = SCALAR.split("[noise]").next().unwrap();
    let file = problem(dir.path(), text);
    assert_eq!(solve(dir.path(), &file, "stochastic", &[]).status.code(), Some(2));
}

#[test]
fn nonconvergence_exits_3_with_history() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SCALAR}[phi]\nkind = \"gaussian-cross-entropy\"\n");
    let file = problem(dir.path(), &text);
    let o = solve(dir.path(), &file, "nonlinear", &["--tol", "1e-300"]);
    assert_eq!(o.status.code(), Some(3));
    let d = json(&dir.path().join("nonlinear/diagnostics.json"));
    assert_eq!(d["error_kind"], "non-convergence");
    assert!(!d["details"]["history"].as_array().unwrap().is_empty());
}

#[test]
fn default_verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfckit(&["verify", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("verify.json"));
    assert_eq!(r["passed"], true);
    let checks = r["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 5);
    for c in checks {
        assert_eq!(c["status"], "pass");
        assert!(c["worst_residual"].as_f64().unwrap() <= c["tolerance"].as_f64().unwrap());
    }
}

#[test]
fn injected_gamma_fault_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfckit(&["verify", "--check", "riccati", "--inject-fault", "flip-gamma-sign", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let r = json(&dir.path().join("verify.json"));
    assert_eq!(r["passed"], false);
    assert_eq!(r["checks"][0]["check_name"], "riccati");
    assert_eq!(r["checks"][0]["status"], "fail");
}

#[test]
fn reproducing_check_over_fifty_trials() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfckit(&["verify", "--check", "reproducing", "--trials", "50", "--grid-k", "40", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("verify.json"));
    assert_eq!(r["checks"][0]["trials"], 50);
    assert!(r["checks"][0]["worst_residual"].as_f64().unwrap() < 1e-6);
}

#[test]
fn unknown_check_is_a_usage_error() {
    let o = mfckit(&["verify", "--check", "vibes", "--out", "/tmp"]);
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn strided_kernel_export_on_a_fine_grid() {
    let dir = tempfile::tempdir().unwrap();
    let file = problem(dir.path(), &SCALAR.replace("K = 200", "K = 1000"));
    let out = dir.path().join("k");
    let o = mfckit(&["export-kernel", &file, "--stride", "10", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("kernel.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 101 * 101);
    assert_eq!(json(&out.join("summary.json"))["lattice_side"], 101);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let file = problem(dir.path(), SCALAR);
    let run = |tag: &str| {
        let out = dir.path().join(tag);
        assert!(mfckit(&["solve", &file, "--method", "stochastic", "--out", out.to_str().unwrap()]).status.success());
        (
            fs::read(out.join("summary.json")).unwrap(),
            fs::read(out.join("paths.csv")).unwrap(),
        )
    };
    let (a, b) = (run("one"), run("two"));
    // The output directory is part of the manifest; strip it before comparing.
    let strip = |bytes: &[u8], tag: &str| String::from_utf8_lossy(bytes).replace(tag, "");
    assert_eq!(strip(&a.0, "one"), strip(&b.0, "two"));
    assert_eq!(a.1, b.1);
    let s: Value = serde_json::from_slice(&a.0).unwrap();
    assert_eq!(s["manifest"]["timestamp"], "2023-11-14T22:13:20Z");
}
