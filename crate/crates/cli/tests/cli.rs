use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn condcov(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condcov")).current_dir(dir).env_remove("CONDCOV_OUT_DIR").args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(out: &Path) -> Value {
    serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap()
}

/// Every artifact except the manifest, by file name.
fn artifacts(out: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

const SIM_CONFIG: &str = r#"
seed = 11
grid = [0.5, 1, 2.5, inf]
[simulate]
scenario = "linear"
n = 4
runs = 3
eval_grid = "-5:20:2.5"
"#;

#[test]
fn simulate_only_writes_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("sim.toml"), SIM_CONFIG).unwrap();
    let o = condcov(dir.path(), &["simulate", "--config", "sim.toml", "--out-dir", "out", "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let ensemble = fs::read_to_string(out.join("ensemble.csv")).unwrap();
    assert!(ensemble.starts_with("run,z,target,estimate\n"));
    assert!(ensemble.contains("rho12@tuned"));
    assert!(out.join("ensemble_losses.csv").exists() && out.join("truth_grid.csv").exists());
    let m = manifest(&out);
    assert_eq!(m["complete"], true);
    assert_eq!(m["seed"], 11);
    let listed: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap()).collect();
    assert!(listed.contains(&"ensemble.csv") && listed.contains(&"ensemble_summary.csv"));
}

#[test]
fn simulate_from_flags_alone() {
    let dir = tempfile::tempdir().unwrap();
    let o =
        condcov(dir.path(), &["simulate", "--scenario", "constant", "--n", "3", "--runs", "2", "--grid", "1,inf", "--out-dir", "o", "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("o/ensemble.csv").exists());
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "input = \"absent/data.csv\"\n").unwrap();
    let o = condcov(dir.path(), &["run", "--config", "c.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("absent/data.csv"), "{}", stderr(&o));
}

#[test]
fn bad_grid_entry_reports_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = condcov(dir.path(), &["validate", "--grid", "1,-0.5", "--json-errors"]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(err["errors"][0]["key"], "grid[1]");
}

#[test]
fn unknown_keys_are_strict_unless_lenient() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "qunatile = 0.9\n").unwrap();
    let o = condcov(dir.path(), &["validate", "--config", "c.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("qunatile"));
    let o = condcov(dir.path(), &["validate", "--config", "c.toml", "--lenient"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn validate_round_trip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SIM_CONFIG).unwrap();
    let first = condcov(dir.path(), &["validate", "--config", "c.toml", "--quantile", "0.95"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.contains("quantile = 0.95") && text.contains("folds = 5"));
    fs::write(dir.path().join("normalized.toml"), &text).unwrap();
    let second = condcov(dir.path(), &["validate", "--config", "normalized.toml"]);
    assert!(second.status.success(), "{}", stderr(&second));
    assert_eq!(String::from_utf8(second.stdout).unwrap(), text);
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SIM_CONFIG).unwrap();
    for out in ["a", "b"] {
        let o = condcov(dir.path(), &["run", "--config", "c.toml", "--out-dir", out, "-q"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (artifacts(&dir.path().join("a")), artifacts(&dir.path().join("b")));
    assert!(a.contains_key("diagnostics_full.csv") && a.contains_key("scores.csv") && a.contains_key("ensemble.csv"));
    assert_eq!(a, b);
    let (ma, mb) = (manifest(&dir.path().join("a")), manifest(&dir.path().join("b")));
    assert_eq!(ma["artifacts"], mb["artifacts"]);
}

#[test]
fn standalone_stages_match_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SIM_CONFIG).unwrap();
    let o = condcov(dir.path(), &["run", "--config", "c.toml", "--out-dir", "all", "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for stage in ["preprocess", "tune", "fit", "monitor", "report", "pca", "simulate"] {
        let o = condcov(dir.path(), &[stage, "--config", "c.toml", "--out-dir", "steps", "-q"]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    assert_eq!(artifacts(&dir.path().join("all")), artifacts(&dir.path().join("steps")));
    assert_eq!(manifest(&dir.path().join("steps"))["complete"], true);
}

#[test]
fn failed_stage_marks_manifest_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SIM_CONFIG).unwrap();
    let o = condcov(dir.path(), &["fit", "--config", "c.toml", "--out-dir", "out"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fit (condcov)"), "{}", stderr(&o));
    let m = manifest(&dir.path().join("out"));
    assert_eq!(m["complete"], false);
    assert!(m["error"].as_str().unwrap().contains("phase1.csv"));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_condcov"))
        .current_dir(dir.path())
        .env("CONDCOV_OUT_DIR", dir.path().join("env-out"))
        .args(["simulate", "--scenario", "linear", "--n", "2", "--runs", "1", "--grid", "1,inf", "-q"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("env-out/ensemble.csv").exists());
}

#[test]
fn csv_input_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    // hourly records over 20 days, temperature cycling daily, one gap
    let mut text = String::from("time,temp,f1,f2\n");
    let mut state = 12345u64;
    let mut noise = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    };
    for i in 0..480 {
        let t = i as f64 * 3600.0;
        let z = 5.0 + 8.0 * (i as f64 * std::f64::consts::TAU / 24.0).sin() + noise();
        let f1 = 3.0 - 0.02 * z + 0.05 * noise();
        let f2 = 7.0 + 0.01 * z + 0.05 * noise() + 0.5 * (f1 - 3.0);
        if i == 100 {
            text += &format!("{t},{z},,{f2}\n");
        } else {
            text += &format!("{t},{z},{f1},{f2}\n");
        }
    }
    fs::write(dir.path().join("data.csv"), text).unwrap();
    let cfg = "input = \"data.csv\"\ntimestamp_col = \"time\"\nconfounder_col = \"temp\"\nphase1_days = 15\nmean_kind = \"bilinear\"\nregime = [\"none\", \"full\"]\ngrid = [1, 2.5, 5, inf]\ndrop_components = [2]\n";
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let o = condcov(dir.path(), &["run", "--config", "c.toml", "--out-dir", "out", "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert_eq!(fs::read_to_string(out.join("aligned.csv")).unwrap().lines().count(), 481);
    let diag = fs::read_to_string(out.join("diagnostics_full.csv")).unwrap();
    assert_eq!(diag.lines().filter(|l| l.ends_with(",I")).count(), 360);
    assert_eq!(diag.lines().filter(|l| l.ends_with(",II")).count(), 120);
    let model: Value = serde_json::from_slice(&fs::read(out.join("model_full.json")).unwrap()).unwrap();
    assert_eq!(model["mean"]["kind"], "bilinear");
    assert_eq!(model["mean"]["breakpoint"], 2.0);
    assert_eq!(model["training_data"], "phase1.csv");
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 4);
    assert!(out.join("reconstructed.csv").exists() && out.join("components.csv").exists());
}

#[test]
fn bare_folds_and_global_h() {
    let dir = tempfile::tempdir().unwrap();
    let o = condcov(dir.path(), &["validate", "--folds", "--global-h", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("folds = 5") && text.contains("cov_target = \"global\""), "{text}");
}
