use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use overlap_core::bounds::OverlapSpec;
use overlap_core::discrete;
use overlap_core::processes::{self, ProcessSpec};
use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_overlap-lab"));
    cmd.env_remove("OVERLAP_LAB_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_rows(path: &Path) -> Vec<overlap_core::harness::ReportRow> {
    overlap_core::harness::read_report(std::fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn bounds_table_matches_closed_forms() {
    let out = run(&["bounds", "--eta", "0.1", "--pi", "0.5"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("b_max = 9\n"), "{text}");
    assert!(text.contains("7.111111"), "{text}");
    assert!(text.contains("1.75778"), "{text}");
    assert!(text.contains("classifier accuracy <= 0.9"), "{text}");

    let out = run(&["bounds", "--eta", "0.1", "--pi", "0.5", "--alpha", "2", "--json"]);
    let table: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((table["b_max"].as_f64().unwrap() - 9.0).abs() < 1e-12);
    assert!((table["chi2"]["forward"].as_f64().unwrap() - 64.0 / 9.0).abs() < 1e-12);
    assert!((table["kl"]["reverse"].as_f64().unwrap() - 0.8 * 9f64.ln()).abs() < 1e-12);
    assert!((table["chi_alpha"][0]["forward"].as_f64().unwrap() - 64.0 / 9.0).abs() < 1e-12);
    assert!((table["accuracy_bound"].as_f64().unwrap() - 0.9).abs() < 1e-15);
}

#[test]
fn bounds_vanish_under_perfect_overlap() {
    let out = run(&["bounds", "--eta", "0.5", "--pi", "0.5", "--json"]);
    let table: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["chi2", "kl"] {
        assert_eq!(table[key]["forward"].as_f64(), Some(0.0));
        assert_eq!(table[key]["reverse"].as_f64(), Some(0.0));
    }
    assert_eq!(table["tv"].as_f64(), Some(0.0));
    for entry in table["chi_alpha"].as_array().unwrap() {
        assert_eq!(entry["forward"].as_f64(), Some(0.0));
    }
}

#[test]
fn bounds_rejects_bad_eta() {
    let out = run(&["bounds", "--eta", "0.6"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("eta must lie in (0, 0.5]"), "{}", stderr(&out));
    let out = run(&["bounds", "--eta", "0.2", "--pi", "0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("pi must lie in"));
}

#[test]
fn verify_rukhin_suite() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("rukhin.csv");
    let out = run(&["verify", "--suite", "rukhin", "--trials", "1000", "--seed", "7", "--out", path_str(&report)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = read_rows(&report);
    // Six divergence families, two directions each.
    assert_eq!(rows.len(), 1000 * 6 * 2);
    assert!(rows.iter().all(|r| r.pass && r.recomputed_pass()));
}

#[test]
fn verify_requires_trials() {
    let out = run(&["verify", "--suite", "theorem1", "--trials", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("trials must be ≥ 1"));
}

#[test]
fn verify_chain_rule_identity() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("chain.csv");
    let out = run(&["verify", "--suite", "chainrule", "--trials", "200", "--seed", "1", "--out", path_str(&report)]);
    assert_eq!(out.status.code(), Some(0));
    let rows = read_rows(&report);
    let gaps: Vec<_> = rows.iter().filter(|r| r.quantity == "chain_rule_gap").collect();
    assert_eq!(gaps.len(), 200);
    assert!(gaps.iter().all(|r| r.observed <= 1e-9));
}

#[test]
fn verify_reports_are_byte_identical_across_workers_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for (k, workers) in ["1", "4", "0", "4"].iter().enumerate() {
        let path = dir.path().join(format!("run{k}.csv"));
        let out = run(&["verify", "--suite", "all", "--trials", "40", "--seed", "9", "--workers", workers, "--out", path_str(&path)]);
        assert_eq!(out.status.code(), Some(0));
        reports.push(std::fs::read(&path).unwrap());
    }
    assert!(reports.windows(2).all(|w| w[0] == w[1]));

    // The seed can come from the environment.
    let path = dir.path().join("env.csv");
    let out = bin()
        .args(["verify", "--suite", "all", "--trials", "40", "--out", path_str(&path)])
        .env("OVERLAP_LAB_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&path).unwrap(), reports[0]);
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn budgeted_sweep_decays_at_root_p() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "sweep.json",
        r#"{
            "schema_version": 1,
            "scenario": {"variant": "lr_budgeted_bernoulli", "eta": 0.1, "pi": 0.5, "p": 4},
            "p_grid": [4, 16, 64, 256],
            "eta": 0.1,
            "pi": 0.5,
            "n": 0
        }"#,
    );
    let rows = dir.path().join("rows.csv");
    let summary = dir.path().join("summary.json");
    let out = run(&["sweep", path_str(&config), "--out", path_str(&rows), "--summary", path_str(&summary)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    let quantity = |name: &str| {
        summary["quantities"]
            .as_array()
            .unwrap()
            .iter()
            .find(|q| q["quantity"] == name)
            .unwrap()
            .clone()
    };
    let slope = quantity("mad")["bound_slope"].as_f64().unwrap();
    assert!((slope + 0.5).abs() <= 0.01, "{slope}");
    assert_eq!(quantity("kl_average")["all_pass"], Value::Bool(true));
    let rows = read_rows(&rows);
    for row in rows.iter().filter(|r| r.quantity == "kl_average") {
        let bound = overlap_core::bounds::kl_bounds(OverlapSpec::new(0.1, 0.5).unwrap().band()).forward / row.p as f64;
        assert!(row.observed <= bound + 1e-12);
        assert!((row.bound - bound).abs() <= 1e-15);
    }
}

#[test]
fn ma1_sweep_operator_norm_is_bounded_and_nondecreasing() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "ma1.json",
        r#"{
            "schema_version": 1,
            "scenario": {"variant": "ma1", "theta": 0.5, "sigma2": 1.0, "p": 8},
            "p_grid": [8, 16, 32, 64, 128, 256, 512, 1024],
            "eta": 0.1,
            "pi": 0.5
        }"#,
    );
    let rows = dir.path().join("rows.csv");
    let out = run(&["sweep", path_str(&config), "--out", path_str(&rows)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let norms: Vec<f64> = read_rows(&rows)
        .into_iter()
        .filter(|r| r.quantity == "opnorm")
        .map(|r| r.observed)
        .collect();
    assert_eq!(norms.len(), 8);
    assert!(norms.windows(2).all(|w| w[1] >= w[0]), "{norms:?}");
    assert!(norms.iter().all(|v| *v <= 2.25));
}

#[test]
fn sampled_sweep_is_deterministic_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "sampled.json",
        r#"{
            "schema_version": 1,
            "scenario": {"variant": "lr_budgeted_bernoulli", "eta": 0.1, "pi": 0.5, "p": 4},
            "p_grid": [4, 16],
            "eta": 0.1,
            "pi": 0.5,
            "n": 3000,
            "replicates": 6,
            "seed": 3
        }"#,
    );
    let mut reports = Vec::new();
    for (k, workers) in ["1", "3", "1"].iter().enumerate() {
        let rows = dir.path().join(format!("rows{k}.csv"));
        let summary = dir.path().join(format!("summary{k}.json"));
        let out = run(&[
            "sweep",
            path_str(&config),
            "--workers",
            workers,
            "--out",
            path_str(&rows),
            "--summary",
            path_str(&summary),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        reports.push((std::fs::read(&rows).unwrap(), std::fs::read(&summary).unwrap()));
    }
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
    let rows = read_rows(&dir.path().join("rows0.csv"));
    assert_eq!(rows.len(), 2 * 6 * 2);
    // Sorted by (scenario, p, replicate).
    let keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.p, r.replicate)).collect();
    assert!(keys.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn sweep_config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "bad.json",
        r#"{"schema_version": 1, "scenario": {"variant": "ma1", "theta": 0.5, "sigma2": 1.0, "p": 8},
            "p_grid": [8, 16], "eta": 0.1, "pi": 0.5, "replicates": 0}"#,
    );
    let out = run(&["sweep", path_str(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/replicates"), "{}", stderr(&out));

    let config = write_config(
        dir.path(),
        "bad2.json",
        r#"{"schema_version": 1, "scenario": {"variant": "ma1", "theta": 0.5, "sigma2": "one", "p": 8},
            "p_grid": [8], "eta": 0.1, "pi": 0.5}"#,
    );
    let out = run(&["sweep", path_str(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/scenario/sigma2"), "{}", stderr(&out));
}

#[test]
fn sweep_violation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // Unit mean gaps cannot coexist with overlap at 0.3.
    let config = write_config(
        dir.path(),
        "shift.json",
        r#"{"schema_version": 1,
            "scenario": {"variant": "gaussian_shift", "m0": [0.0], "m1": [1.0], "variances": [1.0]},
            "p_grid": [8], "eta": 0.3, "pi": 0.5}"#,
    );
    let out = run(&["sweep", path_str(&config)]);
    assert_eq!(out.status.code(), Some(1));
    let first = stderr(&out).lines().next().unwrap().to_string();
    let row: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(row["pass"], Value::Bool(false));
}

fn write_dataset(dir: &Path, name: &str, spec: &ProcessSpec, n: usize, seed: u64) -> PathBuf {
    let data = processes::sample(spec, n, seed).unwrap();
    let path = dir.join(name);
    let file = std::fs::File::create(&path).unwrap();
    data.write_csv(file, "treatment").unwrap();
    path
}

#[test]
fn audit_recovers_extremal_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let band = OverlapSpec::new(0.1, 0.5).unwrap().band();
    let pair = discrete::extremal_pair(band, 0.5).unwrap();
    // One binary covariate marking the high-ratio support point.
    let spec = ProcessSpec::IndependentBernoulli {
        q0: vec![pair.p0()[1]],
        q1: vec![pair.p1()[1]],
        pi: 0.5,
    };
    let data = write_dataset(dir.path(), "extremal.csv", &spec, 100_000, 4);
    let json_path = dir.path().join("audit.json");
    let out = run(&["audit", path_str(&data), "--eta-grid", "0.1,0.2", "--out", path_str(&json_path)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("eta_star_hat"));
    let audit: Value = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    let eta_hat = audit["eta_star_hat"].as_f64().unwrap();
    assert!((eta_hat - 0.1).abs() <= 0.01, "{eta_hat}");
    let acc = audit["bayes_accuracy_hat"].as_f64().unwrap();
    assert!((acc - 0.9).abs() < 0.01, "{acc}");
    let verdicts = audit["verdicts"].as_array().unwrap();
    assert_eq!(verdicts[0]["eta"].as_f64(), Some(0.1));
    assert_eq!(verdicts[0]["consistent"], Value::Bool(true));
    assert_eq!(verdicts[1]["eta"].as_f64(), Some(0.2));
    assert_eq!(verdicts[1]["consistent"], Value::Bool(false));
    assert_eq!(verdicts[1]["accuracy_ok"], Value::Bool(false));
}

#[test]
fn audit_of_constant_propensity_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ProcessSpec::IndependentBernoulli {
        q0: vec![0.3, 0.6, 0.5],
        q1: vec![0.3, 0.6, 0.5],
        pi: 0.4,
    };
    let data = write_dataset(dir.path(), "constant.csv", &spec, 5_000, 2);
    let out = run(&["audit", path_str(&data), "--eta-grid", "0.05,0.1,0.2,0.3,0.35", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let audit: Value = serde_json::from_slice(&out.stdout).unwrap();
    for v in audit["verdicts"].as_array().unwrap() {
        assert_eq!(v["consistent"], Value::Bool(true), "{v}");
    }
    let curve = audit["trimming_curve"].as_array().unwrap();
    let retained: Vec<f64> = curve.iter().map(|p| p["retained_fraction"].as_f64().unwrap()).collect();
    assert!(retained.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn audit_input_errors_carry_context() {
    let dir = tempfile::tempdir().unwrap();
    let missing = write_config(dir.path(), "missing.csv", "x1,x2\n1,2\n3,4\n");
    let out = run(&["audit", path_str(&missing), "--treatment", "treated"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("\"treated\""), "{}", stderr(&out));

    let labels = write_config(dir.path(), "labels.csv", "t,x\n0,1\n1,2\n2,3\n");
    let out = run(&["audit", path_str(&labels), "--treatment", "t"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("row 4"), "{}", stderr(&out));

    let numbers = write_config(dir.path(), "numbers.csv", "t,x\n0,1\n1,abc\n");
    let out = run(&["audit", path_str(&numbers), "--treatment", "t"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("row 3, column \"x\""), "{}", stderr(&out));
}
