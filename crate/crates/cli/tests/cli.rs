use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn gossip_bmuf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gossip-bmuf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_spec(dir: &Path, name: &str, spec: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn run_cmd(sub: &str, spec: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--spec", spec, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    gossip_bmuf(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn bound_spec(alpha: f64, sigma2: f64) -> Value {
    json!({
        "algorithm": "simple-ma",
        "workers": 4,
        "steps": 200,
        "trials": 30,
        "learning_rate": { "initial": alpha, "decay": 1.0, "interval": 1 },
        "objective": { "kind": "quadratic", "dim": 10, "mu": 1.0, "lipschitz": 10.0, "sigma2": sigma2 }
    })
}

#[test]
fn minimal_run_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "spec.json", &json!({"algorithm": "single-sgd", "steps": 100, "workers": 1}));
    let out = run_cmd("run", &spec, dir.path(), &[]);
    assert!(out.status.success(), "{}", stderr(&out));

    let csv = fs::read_to_string(dir.path().join("single-sgd.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,mean_loss,sq_dist,consensus_var,cum_bytes"));
    assert_eq!(lines.count(), 100);

    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("single-sgd.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["steps"], 100);
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());
    assert!(summary["wall_time_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn compare_writes_one_csv_per_run_and_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let run = |label: &str, algorithm: &str, eta: f64| {
        json!({
            "label": label,
            "algorithm": algorithm,
            "workers": 8,
            "steps": 200,
            "seed": 4,
            "bmuf": { "eta": eta, "zeta": 1.0 },
            "sync_periods": [8]
        })
    };
    let spec = write_spec(
        dir.path(),
        "cmp.json",
        &json!({
            "name": "trio",
            "runs": [
                run("MA", "central-bmuf-nbm", 0.0),
                run("gossip-BMUF", "gossip-bmuf", 0.9),
                run("central-BMUF-NBM", "central-bmuf-nbm", 0.9)
            ],
            "groups": [{ "name": "trio", "labels": ["MA", "gossip-BMUF", "central-BMUF-NBM"] }]
        }),
    );
    let out = run_cmd("compare", &spec, dir.path(), &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    for label in ["MA", "gossip-BMUF", "central-BMUF-NBM"] {
        assert!(dir.path().join(format!("{label}.csv")).exists(), "{label}");
    }
    let table = fs::read_to_string(dir.path().join("trio.comparison.txt")).unwrap();
    assert_eq!(table.lines().count(), 5);
    let merged = fs::read_to_string(dir.path().join("trio.comparison.csv")).unwrap();
    assert_eq!(merged.lines().count(), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gossip-BMUF"));
}

#[test]
fn fan_in_above_degree_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "bad.json",
        &json!({"algorithm": "gossip-bmuf", "workers": 8, "symmetric_degree": 1, "fan_in": 3}),
    );
    let out = run_cmd("run", &spec, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("q <= min(2p, n-1)"), "{}", stderr(&out));
}

#[test]
fn malformed_and_missing_specs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    fs::write(&path, "{ not json").unwrap();
    assert_eq!(run_cmd("run", path.to_str().unwrap(), dir.path(), &[]).status.code(), Some(2));
    let unknown = write_spec(dir.path(), "unknown.json", &json!({"wrokers": 4}));
    assert_eq!(run_cmd("run", &unknown, dir.path(), &[]).status.code(), Some(2));
    let missing = dir.path().join("nope.json");
    assert_eq!(run_cmd("run", missing.to_str().unwrap(), dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "diverge.json",
        &json!({
            "algorithm": "single-sgd",
            "workers": 1,
            "steps": 2000,
            "learning_rate": { "initial": 5.0, "decay": 1.0, "interval": 1 }
        }),
    );
    let out = run_cmd("run", &spec, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn bound_check_deterministic_case_passes_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "det.json", &bound_spec(2.0 / 11.0, 0.0));
    let out = run_cmd("bound-check", &spec, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("simple-ma.bound.json")).unwrap()).unwrap();
    assert_eq!(report["pass_fraction"], 1.0);
    assert_eq!(report["slack"], 0.0);
}

#[test]
fn bound_check_noisy_case_passes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "noisy.json", &bound_spec(2.0 / 11.0, 0.04));
    let out = run_cmd("bound-check", &spec, dir.path(), &["--trials", "200"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn bound_check_rejects_large_step() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "big.json", &bound_spec(3.0 / 11.0, 0.04));
    let out = run_cmd("bound-check", &spec, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("2/(mu+L)"), "{}", stderr(&out));
}

#[test]
fn bound_check_needs_enough_trials() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "few.json", &bound_spec(0.1, 0.04));
    let out = run_cmd("bound-check", &spec, dir.path(), &["--trials", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "spec.json",
        &json!({"algorithm": "gossip-bmuf", "workers": 8, "steps": 300, "trials": 3, "sync_periods": [4, 16]}),
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run_cmd("run", &spec, &a, &["--threads", "1"]).status.success());
    assert!(run_cmd("run", &spec, &b, &["--threads", "4"]).status.success());
    assert_eq!(
        fs::read(a.join("gossip-bmuf.csv")).unwrap(),
        fs::read(b.join("gossip-bmuf.csv")).unwrap()
    );
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "spec.json", &json!({"algorithm": "gossip-ma", "workers": 4, "steps": 50}));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run_cmd("run", &spec, &a, &["--seed", "1"]).status.success());
    assert!(run_cmd("run", &spec, &b, &["--seed", "2"]).status.success());
    assert_ne!(fs::read(a.join("gossip-ma.csv")).unwrap(), fs::read(b.join("gossip-ma.csv")).unwrap());
}

#[test]
fn summary_config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "spec.json",
        &json!({
            "algorithm": "local-bmuf",
            "workers": 6,
            "steps": 120,
            "trials": 2,
            "seed": 77,
            "objective": { "kind": "logistic", "dim": 4, "examples": 600 }
        }),
    );
    let first = dir.path().join("first");
    assert!(run_cmd("run", &spec, &first, &[]).status.success());

    let summary: Value =
        serde_json::from_str(&fs::read_to_string(first.join("local-bmuf.summary.json")).unwrap()).unwrap();
    let echo = write_spec(dir.path(), "echo.json", &summary["config"]);
    let second = dir.path().join("second");
    let out = run_cmd("run", &echo, &second, &[]);
    assert!(out.status.success(), "{}", stderr(&out));

    assert_eq!(
        fs::read(first.join("local-bmuf.csv")).unwrap(),
        fs::read(second.join("local-bmuf.csv")).unwrap()
    );
    let again: Value =
        serde_json::from_str(&fs::read_to_string(second.join("local-bmuf.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"], again["config"]);
}
