use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_suppressdp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json_lines(out: &Output) -> Vec<Value> {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn one(args: &[&str]) -> Value {
    let mut rows = json_lines(&run(args));
    assert_eq!(rows.len(), 1);
    rows.remove(0)
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn amplify_matches_the_sampling_formula() {
    let v = one(&["amplify", "--eps", "1", "--p", "0.5"]);
    let expected = (0.5 * (1f64.exp() - 1.0)).ln_1p();
    assert!((v["epsilon"].as_f64().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn calibrate_then_amplify_round_trips() {
    let c = one(&["calibrate", "--eps", "0.7", "--delta", "1e-6", "--p", "0.3"]);
    let e = c["epsilon"].as_f64().unwrap().to_string();
    let d = c["delta"].as_f64().unwrap().to_string();
    let a = one(&["amplify", "--eps", &e, "--delta", &d, "--p", "0.3"]);
    assert!((a["epsilon"].as_f64().unwrap() - 0.7).abs() < 1e-12);
    assert!((a["delta"].as_f64().unwrap() - 1e-6).abs() < 1e-18);
}

#[test]
fn eps_s_on_the_diagonal_is_the_poisson_value() {
    let v = one(&["eps-s", "--eps", "2", "--m", "0.3", "--M", "0.3"]);
    let expected = (0.7 * (2f64.exp() - 1.0)).ln_1p();
    assert!((v["eps_s"].as_f64().unwrap() - expected).abs() < 1e-9);
}

#[test]
fn verify_emits_a_single_report() {
    let v = one(&["verify", "inverse", "--eps", "1", "--m", "0.3", "--M", "0.7"]);
    assert_eq!(v["verdict"], "Pass");
    let f = one(&["verify", "forward", "--eps", "0.5", "--m", "0.4", "--M", "0.4", "--budget", "500"]);
    assert!(f["gap"].as_f64().is_some());
}

#[test]
fn oracle_kernel_on_uniform_poisson() {
    let dir = tempfile::tempdir().unwrap();
    let k = dir.path().join("d.txt");
    let k2 = dir.path().join("d2.txt");
    std::fs::write(&k, "# D = {0.1}, keep 1/2\n0, 0.5\n1, 0.5\n").unwrap();
    std::fs::write(&k2, "0b00, 0.25\n0b01, 0.25\n0b10, 0.25\n0b11, 0.25\n").unwrap();
    let v = one(&[
        "oracle", "kernel", "--records", "0.1", "--y", "0.6", "--kernel", path_str(&k),
        "--kernel-plus", path_str(&k2), "--eps", "1",
    ]);
    let expected = (0.5 * (1f64.exp() - 1.0)).ln_1p();
    assert!((v["epsilon"].as_f64().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn oracle_tight_on_randomized_response() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.txt");
    let e = 1.5f64;
    let hi = e.exp() / (1.0 + e.exp());
    std::fs::write(&t, format!("{hi},{}\n{},{hi}\n", 1.0 - hi, 1.0 - hi)).unwrap();
    let v = one(&["oracle", "tight", "--tables", path_str(&t)]);
    assert!((v["epsilon"].as_f64().unwrap() - e).abs() < 1e-9);
}

#[test]
fn oracle_sensitivity_of_set_suppression() {
    let v = one(&[
        "oracle", "sensitivity", "--universe", "0.1,0.2,0.3", "--algorithm", "set", "--cutoff", "0.25",
    ]);
    assert_eq!(v["sensitivity"], 1);
    assert_eq!(v["infinite"], false);
}

#[test]
fn metrics_subcommands() {
    assert_eq!(
        one(&["metrics", "mpe", "--true-mean", "40", "--noisy-mean", "41"])["mpe"].as_f64(),
        Some(2.5)
    );
    let v = one(&["metrics", "mode-error", "--outputs", "3,3,4,5", "--true-mode", "3"]);
    assert_eq!(v["error"].as_f64(), Some(0.5));
    let w = one(&["metrics", "wilson", "--successes", "0", "--trials", "10"]);
    assert_eq!(w["ci_low"].as_f64(), Some(0.0));
}

#[test]
fn synth_is_seeded() {
    let a = run(&["synth", "--seed", "3", "--format", "csv"]);
    let b = run(&["synth", "--seed", "3", "--format", "csv"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.starts_with("x,y,x_norm,y_norm\n"));
    assert!(text.lines().count() > 100);
}

#[test]
fn run_suppression_writes_rows_and_contour() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.csv");
    let vals: Vec<String> = (0..200).map(|i| format!("{},{}", i % 37 + 20, i)).collect();
    std::fs::write(&data, format!("age,id\n{}\n", vals.join("\n"))).unwrap();
    let out = dir.path().join("rows.jsonl");
    let contour = dir.path().join("contour.csv");
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "path={}\ncolumn=age\nmechanism=noisy-average\nepsilons=1\nmm-grid=0.3,0.6\nreps=4\nseed=11\n",
            data.display()
        ),
    )
    .unwrap();
    let status = run(&[
        "run", "suppression", "--config", path_str(&conf), "--out", path_str(&out),
        "--contour", path_str(&contour), "--reps", "5",
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let rows: Vec<Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // Plain row plus the upper triangle of the 2x2 lattice.
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r["dataset"], "toy");
        let infeasible = r["infeasible"].as_bool().unwrap();
        assert_eq!(r["reps"], if infeasible { 0 } else { 5 });
        assert_eq!(r["mean"].is_null(), infeasible);
    }
    for key in [
        "dataset", "column", "mechanism", "noise", "epsilon", "delta", "p", "m", "M", "variant",
        "metric", "mean", "ci_low", "ci_high", "reps", "infeasible",
    ] {
        assert!(rows[0].get(key).is_some(), "missing {key}");
    }
    let c = std::fs::read_to_string(&contour).unwrap();
    assert!(c.starts_with("epsilon,m,M,value\n"));
    assert_eq!(c.lines().count(), 4);
}

#[test]
fn run_sampling_csv_output() {
    let out = run(&[
        "run", "sampling", "--dataset", "synthetic", "--mechanism", "dp-lloyd", "--epsilons", "1",
        "--p-grid", "0.5", "--reps", "2", "--format", "csv",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("dataset,column,mechanism,noise,epsilon"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn bad_input_fails_cleanly() {
    let out = run(&["amplify", "--eps", "1", "--p", "1.5"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    let out = run(&["calibrate", "--eps", "1"]);
    assert!(!out.status.success());
    let out = run(&["run", "sampling", "--mechanism", "rnm"]);
    assert!(!out.status.success());
}
