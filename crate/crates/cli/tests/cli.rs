use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn orthant(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orthant")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn half_line_ghk_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.json"), r#"{"d":1,"a":[0],"b":["inf"],"sigma":[[1]]}"#).unwrap();
    let o = orthant(&["estimate", "p.json", "--method", "ghk", "--particles", "10"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["log_prob"].as_f64().unwrap(), 0.5f64.ln());
    assert_eq!(v["M"], 10);
}

#[test]
fn generate_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let o = orthant(&["generate", "cauchy", "--dim", "20", "--seed", "4", "--out", "c.json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = orthant(
        &["estimate", "c.json", "--method", "smc", "--move", "gibbs", "--ess", "0.5", "--particles", "1000", "--replications", "2", "--out", "r.jsonl"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = fs::read_to_string(dir.path().join("r.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for l in &lines {
        assert!(l["log_prob"].as_f64().unwrap().is_finite());
        assert_eq!(l["method"], "smc");
    }
}

#[test]
fn student_flag_and_other_generators() {
    let dir = tempfile::tempdir().unwrap();
    for (family, extra) in [("ar1", vec!["--rho", "0.5"]), ("thurstone", vec!["--beta", "0,1,-1"]), ("probit", vec!["--alternatives", "3"])] {
        let mut args = vec!["generate", family, "--dim", "3", "--out", "g.json"];
        args.extend(extra);
        assert_eq!(orthant(&args, dir.path()).status.code(), Some(0), "{family}");
        let o = orthant(&["estimate", "g.json", "--method", "pf", "--nu", "5", "--particles", "200"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{family}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = orthant(&["estimate", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    assert_eq!(orthant(&["estimate"], dir.path()).status.code(), Some(1));
    assert_eq!(orthant(&["frobnicate"], dir.path()).status.code(), Some(1));
    fs::write(dir.path().join("p.json"), r#"{"d":1,"a":[0],"b":["inf"],"sigma":[[1]]}"#).unwrap();
    assert_eq!(orthant(&["estimate", "p.json", "--move", "teleport"], dir.path()).status.code(), Some(1));
    assert_eq!(orthant(&["estimate", "p.json", "--ordering", "maybe"], dir.path()).status.code(), Some(1));
    fs::write(dir.path().join("bad.json"), "{\"experiment\": \"ar1-toy\",\n\"replications\": \"x\"}").unwrap();
    let o = orthant(&["experiment", "bad.json", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert_eq!(orthant(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn experiment_writes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"experiment": "ar1-toy", "dimensions": [10, 20], "replications": 3, "methods": ["ghk", "pf"], "particles": 100}"#,
    )
    .unwrap();
    let o = orthant(&["experiment", "cfg.json", "--out", "out", "--seed", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = fs::read_to_string(dir.path().join("out/runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 12);
    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert!(summary.starts_with("method,dimension,"));
}

#[test]
fn expectation_reports_mean_and_chain() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.json"), r#"{"d":1,"a":[0],"b":["inf"],"sigma":[[1]]}"#).unwrap();
    let o = orthant(&["expectation", "p.json", "--particles", "4000", "--chain", "20000", "--draws", "d.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let truth = (2.0 / std::f64::consts::PI).sqrt();
    assert!((v["mean"][0].as_f64().unwrap() - truth).abs() < 0.05);
    assert!((v["chain_mean"][0].as_f64().unwrap() - truth).abs() < 0.05);
    let csv = fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "eta_1");
    assert_eq!(csv.lines().count(), 20_001);
}
