use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};
use twoscale::problem::{random_instance, validate_assumptions};
use twoscale_cli::config::config_from_value;
use twoscale_cli::{
    analyze_run, load_config, run_experiment, run_sweep, validate_config, CliError, SweepGrid,
    MEAN_COLUMNS, REPLICA_COLUMNS,
};

fn small(out: &Path) -> Value {
    json!({
        "system": {"kind": "random", "d": 2, "nodes": 4, "seed": 1},
        "topology": "ring",
        "iterations": 3000,
        "replicas": 3,
        "output": out,
    })
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

#[test]
fn run_directory_layout_and_columns() {
    let out = tempfile::tempdir().unwrap();
    let report = run_experiment(&config_from_value(small(out.path()), None).unwrap()).unwrap();
    for f in [
        "config.json",
        "mean.csv",
        "summary.json",
        "replica_000.csv",
        "replica_002.json",
    ] {
        assert!(report.dir.join(f).is_file(), "{f} missing");
    }
    assert_eq!(header(&report.dir.join("replica_001.csv")), REPLICA_COLUMNS);
    assert_eq!(header(&report.dir.join("mean.csv")), MEAN_COLUMNS);
    assert!(report.audit_passed());
    assert_eq!(report.summary.replicas, 3);
}

#[test]
fn analyze_reproduces_summary() {
    let out = tempfile::tempdir().unwrap();
    let report = run_experiment(&config_from_value(small(out.path()), None).unwrap()).unwrap();
    let summary = std::fs::read(report.dir.join("summary.json")).unwrap();
    let mean = std::fs::read(report.dir.join("mean.csv")).unwrap();
    std::fs::remove_file(report.dir.join("summary.json")).unwrap();
    std::fs::remove_file(report.dir.join("mean.csv")).unwrap();
    let again = analyze_run(&report.dir).unwrap();
    assert_eq!(again.summary, report.summary);
    assert_eq!(
        std::fs::read(report.dir.join("summary.json")).unwrap(),
        summary
    );
    assert_eq!(std::fs::read(report.dir.join("mean.csv")).unwrap(), mean);
}

#[test]
fn analyze_rejects_non_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    assert!(analyze_run(dir.path()).is_err());
}

#[test]
fn parse_errors_carry_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"iterations\": 10,\n  \"alpha0\": ,\n}\n").unwrap();
    match load_config(&path, &[]) {
        Err(CliError::Parse { line, column, .. }) => {
            assert_eq!(line, 3);
            assert!(column > 0);
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn overrides_apply_before_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, serde_json::to_string(&small(dir.path())).unwrap()).unwrap();
    let loaded = load_config(&path, &["system.nodes=6".into(), "K=500".into()]).unwrap();
    assert_eq!(loaded.config.iterations, 500);
    let report = validate_config(&loaded).unwrap();
    assert_eq!(report.nodes, 6);
    assert!(report.all_pass);
    assert!(load_config(&path, &["alpha0=-1".into()]).is_err());
}

#[test]
fn single_point_sweep_matches_direct_run() {
    let out = tempfile::tempdir().unwrap();
    let base = small(out.path());
    let direct = run_experiment(&config_from_value(base.clone(), None).unwrap()).unwrap();
    let rows = run_sweep(&base, None, &SweepGrid::default()).unwrap().rows;
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert!(row.error.is_empty(), "{}", row.error);
    assert_eq!(Path::new(&row.run_dir), direct.dir);
    assert_eq!(row.sigma, Some(direct.summary.sigma));
    assert_eq!(row.consensus_avg, direct.summary.consensus_avg);
    assert_eq!(
        row.final_mse,
        direct.summary.final_values.map(|f| f.mse_weighted)
    );
}

#[test]
fn sweep_records_failed_points_and_continues() {
    let out = tempfile::tempdir().unwrap();
    let grid = SweepGrid {
        laziness: Some(vec![0.2, 1.5]),
        ..Default::default()
    };
    let rows = run_sweep(&small(out.path()), None, &grid).unwrap().rows;
    assert_eq!(rows.len(), 2);
    assert!(rows[0].error.is_empty());
    assert!(!rows[1].error.is_empty());
}

#[test]
fn zero_noise_converges_to_solution() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = small(out.path());
    cfg["noise"] = json!("none");
    let lambda = validate_assumptions(&random_instance(2, 4, 1, 0.5).unwrap()).min_real_delta;
    cfg["alpha0"] = json!(2.0 / lambda);
    cfg["beta0"] = json!(2.0 / lambda);
    cfg["iterations"] = json!(100000);
    cfg["replicas"] = json!(1);
    let report = run_experiment(&config_from_value(cfg, None).unwrap()).unwrap();
    let last = report.summary.final_values.unwrap();
    assert!(last.mse_weighted < 1e-4, "{last:?}");
    assert!(last.consensus_sq < 1e-5, "{last:?}");
    assert!(report.audit_passed());
}

#[test]
fn divergence_is_reported() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = small(out.path());
    cfg["alpha0"] = json!(1e6);
    cfg["beta0"] = json!(1e6);
    let err = run_experiment(&config_from_value(cfg, None).unwrap()).unwrap_err();
    assert!(matches!(err, CliError::Diverged { .. }), "{err}");
}

#[test]
fn binary_exit_codes() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("c.json");
    std::fs::write(&cfg, serde_json::to_string(&small(out.path())).unwrap()).unwrap();
    let bin = env!("CARGO_BIN_EXE_twoscale");

    let ok = Command::new(bin)
        .arg("validate")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let run = Command::new(bin)
        .args(["run", cfg.to_str().unwrap(), "--set", "iterations=200"])
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0));
    let dir = String::from_utf8(run.stdout).unwrap();
    assert!(Path::new(dir.trim()).join("summary.json").is_file());
    let analyze = Command::new(bin)
        .args(["analyze", dir.trim()])
        .output()
        .unwrap();
    assert_eq!(analyze.status.code(), Some(0));

    let missing = Command::new(bin)
        .args(["run", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}
