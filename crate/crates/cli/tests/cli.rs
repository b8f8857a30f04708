use std::path::Path;
use std::process::{Command, Output};

fn hpi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpi"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("hpi runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_system_is_rejected() {
    let out = hpi(&["ilqr", "--system", "pogo-stick", "--out", "/tmp/never.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown system"));
}

#[test]
fn unwritable_output_fails_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let target = blocker.join("out");
    let start = std::time::Instant::now();
    // The `paper` preset would run for hours if it started.
    let out = hpi(&["run", "--scale-preset", "paper", "--out", target.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(start.elapsed().as_secs() < 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not writable"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"system": "double-integrator", "samples": 7, "experiments": 3, "seed": 9,
            "overrides": {"horizon": 0.2, "params": {"terminal_weight": 4.0}}}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("batch");
    let out = hpi(&["run", "--config", cfg.to_str().unwrap(), "--experiments", "2", "--out", out_dir.to_str().unwrap()]);
    let tables = stdout_json(&out);
    assert_eq!(tables["experiments"], 2);
    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["config"]["samples"], 7);
    assert_eq!(manifest["config"]["seed"], 9);
    assert_eq!(manifest["config"]["experiments"], 2);
    assert_eq!(manifest["system_params"]["terminal_weight"], 4.0);
    assert_eq!(manifest["system_params"]["horizon"], 0.2);
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["experiment_seeds"].as_array().unwrap().len(), 2);

    let csv = std::fs::read_to_string(out_dir.join("experiments.csv")).unwrap();
    assert!(csv.starts_with("experiment_id,seed,proposal_cost,hpi_cost,improvement,jump_count"));
    assert_eq!(csv.lines().count(), 3);
    let diag = std::fs::read_to_string(out_dir.join("diagnostics.csv")).unwrap();
    // 0.2 s at the default 0.01 s step, two experiments, plus the header.
    assert_eq!(diag.lines().count(), 2 * 20 + 1);

    let stats = stdout_json(&hpi(&["stats", "--in", out_dir.to_str().unwrap()]));
    assert_eq!(stats, read_json(&out_dir.join("tables.json")));
}

#[test]
fn ilqr_writes_a_loadable_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("nested/policy.json");
    let summary = stdout_json(&hpi(&["ilqr", "--system", "bouncing-ball", "--dt", "0.02", "--out", path.to_str().unwrap()]));
    assert!(summary["jumps"].as_u64().unwrap() > 0);
    let bench = hpi_core::systems::build(
        "bouncing-ball",
        &hpi_core::SystemOverrides {
            dt: Some(0.02),
            ..Default::default()
        },
    )
    .unwrap();
    let policy = hpi_core::ProposalPolicy::load(&bench.model, &path).unwrap();
    assert_eq!(policy.nominal.grid.steps, 200);
    assert!((policy.nominal.cost - summary["cost"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn girsanov_diagnostic_reports_agreement() {
    let report = stdout_json(&hpi(&["diag", "girsanov", "--system", "bouncing-ball", "--samples", "150"]));
    assert!(report["max_abs_discrepancy"].as_f64().unwrap() < 1e-9);
    assert!(report["paths_with_jumps"].as_u64().unwrap() > 0);
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_hpi"))
        .args(["stats", "--in", "/nonexistent"])
        .env("HPI_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("HPI_THREADS"));
}
