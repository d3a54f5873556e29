use std::path::{Path, PathBuf};
use std::process::Command;

use stochident::config::ConfigFile;
use stochident::experiments::make_example;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stochident"))
}

fn bundled(id: u8) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("configs/example{id}.json"))
}

#[test]
fn empty_config_is_valid() {
    let cfg = ConfigFile::from_json("{}").unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg, ConfigFile::default());
}

#[test]
fn invalid_values_name_their_key() {
    for (text, key) in [
        (r#"{"beta": -1}"#, "beta"),
        (r#"{"level": 0}"#, "level"),
        (r#"{"pcg_tol": 0}"#, "pcg_tol"),
        (r#"{"q_cells": "many"}"#, "q_cells"),
    ] {
        let err = ConfigFile::from_json(text)
            .and_then(|c| c.validate())
            .unwrap_err()
            .to_string();
        assert!(err.contains(key), "{text}: {err}");
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let err = ConfigFile::from_json(r#"{"betta": 1e-5}"#).unwrap_err().to_string();
    assert!(err.contains("betta"), "{err}");
}

#[test]
fn bundled_configs_round_trip() {
    for id in 1..=3 {
        let cfg = ConfigFile::load(&bundled(id)).unwrap();
        cfg.validate().unwrap();
        let again = ConfigFile::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(again, cfg);
        let spec = make_example(id).unwrap();
        assert_eq!(cfg, ConfigFile::from_spec(&spec, 7));
        let applied = cfg.apply(spec.clone()).unwrap();
        assert_eq!(ConfigFile::from_spec(&applied, 7), cfg);
    }
}

#[test]
fn overrides_apply_to_presets() {
    let cfg = ConfigFile::from_json(r#"{"beta": 1e-3, "level": 2}"#).unwrap();
    let spec = cfg.apply(make_example(2).unwrap()).unwrap();
    assert_eq!(spec.beta_variants, vec![1e-3]);
    assert_eq!(spec.run.beta, 1e-3);
    assert_eq!(spec.level, 2);
    let clash = ConfigFile::from_json(r#"{"beta": 1e-3, "beta_variants": [1e-5]}"#).unwrap();
    assert!(clash.apply(make_example(2).unwrap()).is_err());
}

#[test]
fn check_command_passes() {
    let out = bin().arg("check").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn run_example_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run-example", "--id", "1", "--seed", "7", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["status"], "converged");
    assert_eq!(run["config"]["seed"], 7);
    for k in 1..=4 {
        assert!(dir.path().join(format!("moments_identified_k{k}.csv")).exists());
        assert!(dir.path().join(format!("moments_exact_k{k}.csv")).exists());
    }
}

#[test]
fn kl_analyze_missing_file_fails() {
    let out = bin().args(["kl-analyze", "/nonexistent/samples.csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn bad_arguments_fail() {
    assert_eq!(
        bin().args(["run-example", "--id", "9"]).output().unwrap().status.code(),
        Some(1)
    );
    assert_ne!(
        bin().args(["run-example", "--bogus"]).output().unwrap().status.code(),
        Some(0)
    );
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"example": 1, "noise": -0.5}"#).unwrap();
    let out = bin().arg("run-example").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise"));
}

#[test]
fn kl_analyze_writes_model() {
    // constant-forcing custom problem on a 2x2 coarse square: 25 state vertices
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"q_cells": 2}"#).unwrap();
    let rows: Vec<String> = (0..25)
        .map(|i| {
            let x = i as f64 / 25.0;
            (0..12)
                .map(|s| format!("{}", (x * (s as f64 + 1.0)).sin()))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    let data = dir.path().join("samples.csv");
    std::fs::write(&data, rows.join("\n")).unwrap();
    let out = bin()
        .arg("kl-analyze")
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("rank "));
    for f in ["kl_model.json", "y_samples.csv", "eigenvalues.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
