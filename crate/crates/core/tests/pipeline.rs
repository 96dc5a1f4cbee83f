use std::fs;
use std::process::Command;

use fbcap::pipeline::{run_pipeline, validate_config, RunReport, RunStatus};

const EXAMPLE1: &str = r#"{"channel": {"num": [1.0, 0.1]}, "power": 10}"#;

#[test]
fn example1_capacity_field() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&validate_config(EXAMPLE1).unwrap(), dir.path()).unwrap();
    assert_eq!(report.status, RunStatus::Complete);
    let capacity = report.capacity_bits.unwrap();
    assert!((capacity - 1.7688).abs() <= 5e-3, "{capacity}");
    for name in ["report.json", "convergence.csv", "impulse.csv", "scheme.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let impulse = fs::read_to_string(dir.path().join("impulse.csv")).unwrap();
    assert_eq!(impulse.lines().count(), 41);
}

#[test]
fn report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"{"channel": {"num": [1.0, 0.1, 0.5]}, "power": 10, "m": 24, "h_max": 3,
                     "controller_order": 4, "simulation": {"horizon": 12, "trials": 50, "seed": 3}}"#;
    let report = run_pipeline(&validate_config(config).unwrap(), dir.path()).unwrap();
    assert_eq!(report.status, RunStatus::Complete, "{:?}", report.error);
    assert!(report.transmission.is_some());
    let text = fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);

    let csv = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    for (line, row) in csv.lines().skip(1).zip(&report.convergence) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0].parse::<usize>().unwrap(), row.h);
        assert_eq!(cols[1].parse::<f64>().unwrap(), row.upper_bits);
        assert_eq!(cols[2].parse::<f64>().ok(), row.lower_bits);
    }
}

#[test]
fn runs_are_reproducible() {
    let config = r#"{"channel": {"num": [1.0, -0.3], "den": [1.0, 0.4]}, "power": 2, "m": 20, "h_max": 3,
                     "simulation": {"horizon": 10, "trials": 40, "seed": 11}}"#;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let v = validate_config(config).unwrap();
    run_pipeline(&v, a.path()).unwrap();
    run_pipeline(&v, b.path()).unwrap();
    for name in ["report.json", "convergence.csv", "impulse.csv", "scheme.json"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn failure_leaves_an_incomplete_report() {
    let dir = tempfile::tempdir().unwrap();
    // an order-30 reduction of a 12-tap filter exceeds the Hankel rank
    let config = r#"{"channel": {"num": [1.0, 0.1, 0.5]}, "power": 10, "m": 12, "h_max": 2, "controller_order": 30}"#;
    let report = run_pipeline(&validate_config(config).unwrap(), dir.path()).unwrap();
    assert_eq!(report.status, RunStatus::Incomplete);
    assert!(report.error.as_deref().unwrap().contains("exceeds numerical rank"));
    let text = fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(text.contains("\"status\": \"incomplete\""));
    assert!(dir.path().join("convergence.csv").exists());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fbcap"))
}

#[test]
fn cli_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, EXAMPLE1).unwrap();
    let out = dir.path().join("out");
    let status = cli()
        .args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--m", "16", "--h-max", "2"])
        .args(["--power", "1", "--simulate", "--seed", "4", "--solver-tol", "1e-8", "--quad-tol", "1e-9"])
        .env("FBCAP_THREADS", "2")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let report: RunReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!((report.config.m, report.config.h_max, report.config.power), (16, 2, 1.0));
    assert_eq!(report.config.solver.tol_grad, 1e-8);
    assert_eq!(report.config.quad_tol, 1e-9);
    assert_eq!(report.config.simulation.unwrap().seed, 4);
    assert_eq!(report.convergence.len(), 2);
}

#[test]
fn cli_rejects_invalid_configs_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"channel": {"num": [1.0, 0.1]}, "power": 0, "m": 4}"#).unwrap();
    let out = dir.path().join("out");
    let result = cli().args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]).output().unwrap();
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("power must be positive"), "{stderr}");
    assert!(stderr.contains("m must exceed h_max"), "{stderr}");
    assert!(!out.exists());
}
