use std::path::Path;
use std::process::{Command, Output};

fn gd4(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gd4")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gd4(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn sample_then_detect() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("inst.json");
    ok(&["sample", "--snr-db", "40", "--seed", "3", "--out", p(&inst)]);
    for method in ["babai", "kbest:5", "brute"] {
        let out: serde_json::Value = serde_json::from_str(&ok(&["detect", "--instance", p(&inst), "--method", method])).unwrap();
        assert_eq!(out["method"], method);
        assert_eq!(out["x_hat"].as_array().unwrap().len(), 8);
        assert_eq!(out["ser"], 0.0, "{method} at 40 dB");
    }
}

#[test]
fn sample_is_seeded() {
    assert_eq!(ok(&["sample", "--seed", "9"]), ok(&["sample", "--seed", "9"]));
    assert_ne!(ok(&["sample", "--seed", "9"]), ok(&["sample", "--seed", "10"]));
}

#[test]
fn bench_writes_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.cfg");
    std::fs::write(&config, "# small sweep\nsnr_db = 10, 20\nn_instances = 50\nmethods = babai, kbest:4\nseed = 5\n").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["bench", "--config", p(&config), "--output", p(&out)]);
        std::fs::read_to_string(out).unwrap()
    };
    let (a, b) = (run("a.csv"), run("b.csv"));
    assert_eq!(a, b);
    assert!(a.starts_with("method,snr_db,n_instances,ser,ser_ci95_halfwidth"));
    assert_eq!(a.lines().count(), 5);
    assert!(dir.path().join("a.timing.csv").exists());
}

#[test]
fn train_then_cold_start() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("net.ckpt");
    let log = dir.path().join("loss.csv");
    ok(&[
        "train", "--out", p(&ckpt), "--log", p(&log), "--iterations", "3", "--batch-size", "2",
        "--hidden", "8", "--layers", "2",
    ]);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);
    let inst = dir.path().join("inst.json");
    ok(&["sample", "--out", p(&inst)]);
    let out: serde_json::Value =
        serde_json::from_str(&ok(&["detect", "--instance", p(&inst), "--method", "cold:3", "--checkpoint", p(&ckpt)])).unwrap();
    assert_eq!(out["x_hat"].as_array().unwrap().len(), 8);
}

#[test]
fn calibrate_then_warm_start() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("net.ckpt");
    ok(&["train", "--out", p(&ckpt), "--iterations", "1", "--batch-size", "1", "--hidden", "8", "--layers", "1"]);
    let cal = dir.path().join("cal.csv");
    ok(&["calibrate", "--checkpoint", p(&ckpt), "--snr-db", "15,20", "--samples", "1000", "--out", p(&cal)]);
    assert!(std::fs::read_to_string(&cal).unwrap().starts_with("# gd4-calibration"));
    let inst = dir.path().join("inst.json");
    ok(&["sample", "--snr-db", "20", "--out", p(&inst)]);
    ok(&["detect", "--instance", p(&inst), "--method", "warm", "--checkpoint", p(&ckpt), "--calibration", p(&cal)]);
}

#[test]
fn rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("inst.json");
    ok(&["sample", "--out", p(&inst)]);
    assert!(!gd4(&["detect", "--instance", p(&inst), "--method", "nope"]).status.success());
    assert!(!gd4(&["detect", "--instance", p(&inst), "--method", "cold:2"]).status.success());
    assert!(!gd4(&["bench", "--n-t", "8", "--methods", "brute", "--output", p(&dir.path().join("x.csv"))]).status.success());
}
