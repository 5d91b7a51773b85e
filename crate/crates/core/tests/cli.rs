//! End-to-end checks of the command-line interface.

use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_stoflow")
}

fn tmp_dir(name: &str) -> std::path::PathBuf {
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn list_catalog_names_every_key() {
    let out = Command::new(bin()).arg("list-catalog").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for key in [
        "zero",
        "constant",
        "linear_ou",
        "sign",
        "step_monotone",
        "componentwise_step",
    ] {
        assert!(text.contains(key), "missing {key} in listing");
    }
}

#[test]
fn run_passes_on_trivial_flow_and_writes_report() {
    let dir = tmp_dir("cli_run");
    let cfg = r#"{
  "kind": "flow",
  "drift": {"key": "zero", "params": [1.0]},
  "d": 1, "T": 0.5, "dt": 0.03125,
  "lattice": {"min": [-2.0], "max": [2.0], "n": [9]},
  "M": 8, "seed": 5
}"#;
    let cfg_path = dir.join("flow.json");
    std::fs::write(&cfg_path, cfg).unwrap();
    let out_dir = dir.join("out");
    let out = Command::new(bin())
        .args([
            "run",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("[pass] compose_deviation"));
    let report_path = out_dir.join("flow_0").join("report.json");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(report_path).unwrap()).unwrap();
    assert_eq!(report["schema_version"], "v1");
    assert!(report["checks"].as_array().unwrap().len() >= 3);
    assert!(out_dir.join("flow_0").join("flow.csv").exists());
}

#[test]
fn invalid_config_exits_with_diagnostics_naming_the_field() {
    let dir = tmp_dir("cli_bad");
    let cfg = r#"{
  "kind": "flow",
  "drift": {"key": "zero", "params": [1.0]},
  "d": 1, "T": 1.0, "dt": 0.3,
  "lattice": {"min": [-1.0], "max": [1.0], "n": [3]},
  "M": 4, "seed": 5
}"#;
    let cfg_path = dir.join("bad.json");
    std::fs::write(&cfg_path, cfg).unwrap();
    let out = Command::new(bin())
        .args(["run", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("dt"), "stderr was: {stderr}");
}

#[test]
fn seed_override_changes_the_echoed_config() {
    let dir = tmp_dir("cli_seed");
    let cfg = r#"{
  "kind": "flow",
  "drift": {"key": "zero", "params": [1.0]},
  "d": 1, "T": 0.5, "dt": 0.0625,
  "lattice": {"min": [-1.0], "max": [1.0], "n": [5]},
  "M": 4, "seed": 5
}"#;
    let cfg_path = dir.join("flow.json");
    std::fs::write(&cfg_path, cfg).unwrap();
    let out_dir = dir.join("out");
    let out = Command::new(bin())
        .args([
            "run",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "42",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("flow_0").join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["config"]["seed"], 42);
}

#[test]
fn empty_manifest_is_an_error() {
    let dir = tmp_dir("cli_empty");
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, r#"{"configs": []}"#).unwrap();
    let out = Command::new(bin())
        .args(["suite", "--config", manifest.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
