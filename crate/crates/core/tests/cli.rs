use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_structslam"))
}

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.json")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

#[test]
fn bundled_config_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["run", "--deterministic", "--threads", "2", "--config"])
        .arg(example_config())
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "run_id,seed,config_hash,ate_rmse_m,mean_ape_m,rejected_outliers");
    // Three seeds times three modes.
    assert_eq!(lines.count(), 9);
    let runs: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("runs.json")).unwrap()).unwrap();
    assert_eq!(runs["runs"].as_array().unwrap().len(), 9);
}

#[test]
fn single_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["run", "--deterministic", "--seed", "5", "--config"])
        .arg(example_config())
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("5")));
}

#[test]
fn malformed_json_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{ \"seeds\": [1, ").unwrap();
    let out = run(bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
    let missing = run(bin().args(["gen-scene", "--config", "/nonexistent/config.json"]));
    assert_eq!(missing.status.code(), Some(3));
    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{ "sceen": {} }"#).unwrap();
    assert_eq!(run(bin().args(["run", "--config"]).arg(&unknown)).status.code(), Some(3));
}

#[test]
fn eval_identical_trajectories_prints_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().args(["gen-scene", "--seed", "3", "--out"]).arg(dir.path()));
    assert!(out.status.success());
    let traj = dir.path().join("trajectory.json");
    let out = run(bin().arg("eval").arg(&traj).arg(&traj));
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.0");
    let out = run(bin().arg("eval").arg(&traj).arg(dir.path().join("scene.json")));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_scene_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(run(bin().args(["gen-scene", "--seed", "7", "--out"]).arg(d.path())).status.success());
    }
    for name in ["scene.json", "observations.json", "trajectory.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn jacobian_check_passes() {
    let out = run(bin().args(["jacobian-check", "--trials", "1000"]));
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let err: f64 = text
        .split_whitespace()
        .find_map(|t| t.strip_prefix("max_rel_error="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-5);
}
