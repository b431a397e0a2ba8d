use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kzchain(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kzchain"))
        .current_dir(dir)
        .env_remove("KZCHAIN_WORKERS")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"{"system": {"L": 8}, "protocol": {"t_delta_us": [3.0, 1.7, 1.0, 0.55, 0.3, 0.17, 0.1]}, "analysis": {"mu_window": [6.0, 40.0]}, "seed": 5, "save_states": true}"#;

#[test]
fn sweep_is_deterministic_across_runs_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "c.json", SMALL);
    let a = kzchain(dir, &["sweep", "--config", "c.json", "--out", "a", "--workers", "1"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let b = Command::new(env!("CARGO_BIN_EXE_kzchain"))
        .current_dir(dir)
        .env("KZCHAIN_WORKERS", "3")
        .args(["sweep", "--config", "c.json", "--out", "b"])
        .output()
        .unwrap();
    assert_eq!(b.status.code(), Some(0));
    for f in ["sweep.csv", "correlators.csv", "distributions.json", "fit.json", "state_000.bin"] {
        assert_eq!(std::fs::read(dir.join("a").join(f)).unwrap(), std::fs::read(dir.join("b").join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.join("a/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# kzchain 0.1.0 config_sha256="));
    assert!(lines.next().unwrap().starts_with("gamma_MHz_per_us,t_delta_us,mean_D,var_D,ratio,xi,xi_err"));
    let means: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(means.len(), 7);
    assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("a/manifest.json")).unwrap()).unwrap();
    assert!(manifest["points"].as_array().unwrap().iter().all(|p| p["status"] == "ok"));
}

#[test]
fn config_errors_exit_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "empty.json", r#"{"system": {"L": 8}, "protocol": {"t_delta_us": []}}"#);
    let out = kzchain(dir, &["sweep", "--config", "empty.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.join("o").exists());

    write(dir, "typo.json", r#"{"system": {"L": 8, "omega_max_MHz": 2.5}}"#);
    let out = kzchain(dir, &["sweep", "--config", "typo.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("omega_max_MHz"));

    write(
        dir,
        "hold.json",
        r#"{"system": {"L": 8}, "protocol": {"hold": {"t_delta_us": 1.0, "t_hold_us": 0.5, "sample_interval_us": 0.6}}}"#,
    );
    assert_eq!(kzchain(dir, &["hold", "--config", "hold.json", "--out", "o"]).status.code(), Some(2));

    write(dir, "big.json", r#"{"system": {"L": 18}, "protocol": {"t_delta_us": [1.0]}}"#);
    assert_eq!(kzchain(dir, &["compare-space", "--config", "big.json", "--out", "o"]).status.code(), Some(2));

    write(dir, "ok.json", SMALL);
    let out = kzchain(dir, &["sweep", "--config", "ok.json", "--workers", "0", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.join("o").exists());
}

#[test]
fn failed_point_gives_partial_exit_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "c.json", r#"{"system": {"L": 8}, "protocol": {"t_delta_us": [30.0, 0.1]}, "integrator": {"max_steps": 300}}"#);
    let out = kzchain(dir, &["sweep", "--config", "c.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("o/manifest.json")).unwrap()).unwrap();
    let status: Vec<&str> = manifest["points"].as_array().unwrap().iter().map(|p| p["status"].as_str().unwrap()).collect();
    assert_eq!(status, ["failed", "ok"]);
    let csv = std::fs::read_to_string(dir.join("o/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn sample_mitigate_and_fit_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "c.json", SMALL);
    assert_eq!(kzchain(dir, &["sweep", "--config", "c.json", "--out", "run"]).status.code(), Some(0));
    write(dir, "cal.json", r#"{"eps10": 0.061, "d_eps10": 0.004, "eps01": 0.009, "d_eps01": 0.002}"#);

    let out = kzchain(dir, &["sample", "--state", "run/state_003.bin", "--shots", "20000", "--seed", "9", "--calibration", "cal.json", "--out", "shots"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("shots/shots.txt.json").exists());

    let out = kzchain(dir, &["mitigate", "--shots", "shots/shots.txt", "--calibration", "cal.json", "--seed", "2", "--baseline", "--out", "zne"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let zne: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("zne/zne.json")).unwrap()).unwrap();
    for key in ["wall_mean", "wall_var"] {
        for field in ["value", "stat_err", "sys_err"] {
            assert!(zne[key][field].is_f64(), "{key}.{field}");
        }
    }
    assert!(zne["baseline_mean"]["value"].is_f64());
    assert_eq!(zne["wall_var"]["order"], "quadratic");

    write(dir, "bad.json", r#"{"eps10": 0.061, "d_eps10": 0.004, "d_eps01": 0.002}"#);
    let out = kzchain(dir, &["mitigate", "--shots", "shots/shots.txt", "--calibration", "bad.json", "--out", "zne2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eps01"));

    write(dir, "broken.txt", "0101\n01x1\n");
    let out = kzchain(dir, &["mitigate", "--shots", "broken.txt", "--out", "zne3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.txt:2"));

    assert_eq!(kzchain(dir, &["fit", "--config", "c.json", "--input", "run", "--out", "refit"]).status.code(), Some(0));
    let a: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("run/fit.json")).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("refit/fit.json")).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn hold_writes_series_and_spectrum() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(
        dir,
        "h.json",
        r#"{"system": {"L": 8}, "protocol": {"hold": {"t_delta_us": 1.0, "t_hold_us": 0.5, "sample_interval_us": 0.02}}}"#,
    );
    let out = kzchain(dir, &["hold", "--config", "h.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("o/hold.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 26);
    let spec: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("o/spectrum.json")).unwrap()).unwrap();
    assert!(spec["nu_gap_MHz"].as_f64().unwrap() > 0.0);
    assert!(spec["spectrum"]["peak_frequency"].is_f64());
    assert_eq!(spec["meta"]["version"], "0.1.0");
}
