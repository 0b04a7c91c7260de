use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use carve_core::asymptotics::{mv_decay_table, MvDecayRow};
use carve_core::gauss::{QuadratureConfig, RngStream};
use carve_core::mv::{
    mv_confidence_interval, mv_pivot, nuisance_statistic, CarveGeometry, MvPivotOptions,
};
use carve_core::selection::{apply_rule, screen_bh, ScreeningRule};
use carve_core::sim::{read_pivots_csv, uniformity_report};
use carve_core::{ConfidenceInterval, PivotResult};
use nalgebra::{DMatrix, DVector};
use serde_json::Value;
use tempfile::TempDir;

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn carve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carve"))
        .args(args)
        .output()
        .unwrap()
}

fn run(cmd: &str, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    carve(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_str(&stdout(o)).unwrap()
}

#[test]
fn screen_threshold_selects_first_coordinate() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "s.json",
        r#"{"rule":{"variant":"fixed_threshold","lambda":[1,1,1]},"z1":[2.5,0.3,-1]}"#,
    );
    let o = run("screen", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0));
    let v = json(&o);
    assert_eq!(v["status"], "selected");
    assert_eq!(v["selected"], serde_json::json!([0]));
    assert_eq!(v["signs"], serde_json::json!([1.0]));
}

#[test]
fn screen_reads_csv_data() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "z.csv", "2.5,0.3\n-1\n");
    let cfg = write(
        dir.path(),
        "s.json",
        &format!(
            r#"{{"rule":{{"variant":"fixed_threshold","lambda":[1,1,1]}},"data_csv":{:?}}}"#,
            data.to_str().unwrap()
        ),
    );
    let v = json(&run("screen", &cfg, &[]));
    assert_eq!(v["selected"], serde_json::json!([0]));
}

#[test]
fn malformed_and_unknown_keys_exit_2() {
    let dir = TempDir::new().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"rule": "#);
    assert_eq!(run("screen", &bad, &[]).status.code(), Some(2));
    let extra = write(
        dir.path(),
        "extra.json",
        r#"{"rule":{"variant":"top_d","d":1},"z1":[1,2],"colour":"red"}"#,
    );
    assert_eq!(run("screen", &extra, &[]).status.code(), Some(2));
    let nested = write(
        dir.path(),
        "nested.json",
        r#"{"model":"seq","z_obs":0,"m":0,"rho":1,"offset":0,"bogus":1}"#,
    );
    assert_eq!(run("pivot", &nested, &[]).status.code(), Some(2));
    let missing = write(dir.path(), "missing.json", "{}");
    assert_eq!(run("simulate", &missing, &[]).status.code(), Some(2));
}

#[test]
fn empty_selection_has_marker_and_exit_0() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "s.json",
        r#"{"rule":{"variant":"fixed_threshold","lambda":[5,5,5]},"z1":[2.5,0.3,-1]}"#,
    );
    let o = run("screen", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&o)["status"], "empty");
}

#[test]
fn screen_bh_matches_library_bytes() {
    let dir = TempDir::new().unwrap();
    let z1 = [3.1, -0.4, 2.7, 0.9, -3.3, 1.2, 0.05, -2.2];
    let cfg = write(
        dir.path(),
        "bh.json",
        &format!(
            r#"{{"rule":{{"variant":"bh_step_up","alpha":0.1}},"z1":{}}}"#,
            serde_json::to_string(&z1).unwrap()
        ),
    );
    let o = run("screen", &cfg, &[]);
    let expected = serde_json::to_string(&screen_bh(&z1, 0.1).unwrap()).unwrap();
    assert_eq!(stdout(&o), format!("{expected}\n"));
}

#[test]
fn seq_pivot_round_trips_three_quarters() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "p.json",
        r#"{"model":"seq","z_obs":0,"m":0,"rho":1,"offset":0,"sign":1}"#,
    );
    let o = run("pivot", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0));
    let p: PivotResult = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((p.value - 0.75).abs() < 1e-12, "{}", p.value);
}

#[test]
fn seq_underflow_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "u.json",
        r#"{"model":"seq","z_obs":-30,"m":-40,"rho":0.1,"offset":0}"#,
    );
    assert_eq!(run("pivot", &cfg, &[]).status.code(), Some(3));
}

#[test]
fn ci_nests_across_levels() {
    let dir = TempDir::new().unwrap();
    let interval = |level: f64| -> ConfidenceInterval {
        let cfg = write(
            dir.path(),
            "c.json",
            &format!(r#"{{"model":"seq","z_obs":1.3,"level":{level},"rho":0.8,"threshold":1.0}}"#),
        );
        let o = run("ci", &cfg, &[]);
        assert_eq!(o.status.code(), Some(0));
        serde_json::from_str(&stdout(&o)).unwrap()
    };
    let (narrow, wide) = (interval(0.8), interval(0.95));
    assert!(wide.lower < narrow.lower && narrow.upper < wide.upper);
}

const MV_CONFIG: &str = r#"{"model":"mv","z":[2.1,1.4,-0.3],"z1":[2.5,1.6,-1.0],
  "rule":{"variant":"top_d","d":2},"sigma":[[1,0.3,0],[0.3,1,0.2],[0,0.2,1]],
  "rho":1.0,"j":0,"mu_j":0.5,"level":0.9,"seed":11}"#;

fn mv_library(seed: u64) -> (PivotResult, ConfidenceInterval) {
    let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 1.0, 0.2, 0.0, 0.2, 1.0]);
    let rule = ScreeningRule::TopD { d: 2 };
    let sel = apply_rule(&rule, &[2.5, 1.6, -1.0]).unwrap();
    let geom = CarveGeometry::screening(&sigma, sel.outcome().unwrap(), 1.0).unwrap();
    let z = DVector::from_row_slice(&[2.1, 1.4, -0.3]);
    let nuis = nuisance_statistic(&z, &sigma, 0).unwrap();
    let (opts, cfg) = (MvPivotOptions::default(), QuadratureConfig::default());
    let stream = RngStream::new(seed, 0);
    let p = mv_pivot(2.1, 0, &geom, 0.5, &nuis, &opts, &cfg, &stream).unwrap();
    let ci = mv_confidence_interval(2.1, 0, &geom, &nuis, 0.9, &opts, &cfg, &stream).unwrap();
    (p, ci)
}

#[test]
fn mv_pivot_and_ci_match_library_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "m.json", MV_CONFIG);
    let (p, ci) = mv_library(11);
    assert_eq!(
        stdout(&run("pivot", &cfg, &[])),
        format!("{}\n", serde_json::to_string(&p).unwrap())
    );
    assert_eq!(
        stdout(&run("ci", &cfg, &[])),
        format!("{}\n", serde_json::to_string(&ci).unwrap())
    );
    let (p2, _) = mv_library(12);
    assert_eq!(
        stdout(&run("pivot", &cfg, &["--seed", "12"])),
        format!("{}\n", serde_json::to_string(&p2).unwrap())
    );
}

#[test]
fn mv_unselected_coordinate_is_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "m.json",
        &MV_CONFIG.replace(r#""j":0"#, r#""j":2"#),
    );
    assert_eq!(run("pivot", &cfg, &[]).status.code(), Some(2));
}

const SIM_CONFIG: &str = r#"{
  "n1": 40, "n2": 40, "family": "laplace",
  "regime": {"kind": "fixed", "beta": [0.0, 0.1, 0.2]},
  "rule": {"variant": "fixed_threshold", "lambda": [0.5, 0.5, 0.5]},
  "randomization_mode": "implicit_carving",
  "replications": 100, "master_seed": 3, "level": 0.9
}"#;

fn simulate(dir: &Path, cfg: &Path, extra: &[&str]) -> (Vec<u8>, Vec<u8>) {
    let mut args = vec!["--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run("simulate", cfg, &args);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let _: Value = serde_json::from_str(&stdout(&o)).unwrap();
    (
        std::fs::read(dir.join("records.csv")).unwrap(),
        std::fs::read(dir.join("summary.json")).unwrap(),
    )
}

#[test]
fn simulate_smoke_is_deterministic_and_recomputable() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "sim.json", SIM_CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = simulate(&a, &cfg, &[]);
    let second = simulate(&b, &cfg, &[]);
    assert_eq!(first, second);

    let summary: Value = serde_json::from_slice(&first.1).unwrap();
    assert_eq!(summary["replications"], 100);
    let pivots = read_pivots_csv(&first.0[..]).unwrap();
    assert_eq!(summary["n_pivots"].as_u64().unwrap() as usize, pivots.len());
    let ks = uniformity_report(&pivots).unwrap().ks_distance;
    assert_eq!(summary["ks_distance"].as_f64().unwrap(), ks);
}

#[test]
fn simulate_is_invariant_to_jobs_and_honours_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "sim.json", SIM_CONFIG);
    let base = simulate(&dir.path().join("j1"), &cfg, &["--jobs", "1"]);
    for jobs in ["2", "3"] {
        assert_eq!(
            simulate(&dir.path().join(jobs), &cfg, &["--jobs", jobs]),
            base
        );
    }
    let reseeded = simulate(&dir.path().join("s"), &cfg, &["--seed", "4"]);
    assert_ne!(reseeded.0, base.0);
}

#[test]
fn verify_default_suite_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "v.json", "{}");
    let o = run("verify", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(json(&o)["passed"], true);
}

#[test]
fn verify_injected_mills_fault_exits_1() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "v.json",
        r#"{"checks":["sandwich","convolution"],"inject_fault":"mills_lower"}"#,
    );
    let o = run("verify", &cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
    let v = json(&o);
    assert_eq!(v["failures"], serde_json::json!(["sandwich"]));
}

#[test]
fn verify_decay_table_matches_library() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "v.json",
        r#"{"checks":["mv_decay"],"mv_decay_n_mc":20000,"seed":9}"#,
    );
    let o = run("verify", &cfg, &[]);
    let v = json(&o);
    let rows: Vec<MvDecayRow> = serde_json::from_value(v["checks"][0]["data"].clone()).unwrap();
    let q = DMatrix::from_row_slice(2, 3, &[-1.0, 0.3, 0.0, 0.2, -0.9, 0.1]);
    let ab = DVector::from_row_slice(&[0.8, 0.6]);
    let expected = mv_decay_table(
        &q,
        &ab,
        &[6.0, 8.0, 10.0, 12.0],
        20000,
        &RngStream::new(9, 1),
    )
    .unwrap();
    assert_eq!(rows, expected);
}
