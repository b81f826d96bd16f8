mod common;

use std::path::Path;
use std::process::{Command, Output};

fn robonurse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robonurse"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_input_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = common::data("catalog.toml");
    let weights = common::data("weights.toml");
    assert_eq!(robonurse(&["sim", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(robonurse(&["bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(
        robonurse(&["sim", "--scenario", "missing.toml"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        robonurse(&["tradeoff", "--catalog", path(&catalog), "--weights", "missing.toml"], dir.path())
            .status
            .code(),
        Some(2)
    );

    let text = std::fs::read_to_string(&weights).unwrap();
    let short = text.replace("c = [10,", "c = [0,");
    assert_ne!(short, text);
    let bad = dir.path().join("weights.toml");
    std::fs::write(&bad, short).unwrap();
    let out = robonurse(&["tradeoff", "--catalog", path(&catalog), "--weights", path(&bad)], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("100"));
}

#[test]
fn fixed_start_time_gives_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["sim", "--duration", "400", "--seed", "42", "--start-time", "1000", "--data-dir", "runs"];
    let oa = robonurse(&args, a.path());
    let ob = robonurse(&args, b.path());
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(oa.stdout, ob.stdout);
    for name in ["default-42-1000.jsonl", "default-42-1000.report.json"] {
        let x = std::fs::read(a.path().join("runs").join(name)).unwrap();
        let y = std::fs::read(b.path().join("runs").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn replay_reproduces_the_log_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = robonurse(
        &["sim", "--duration", "300", "--start-time", "7", "--data-dir", "runs", "--machine"],
        dir.path(),
    );
    assert!(out.status.success());
    let log = dir.path().join("runs/default-42-7.jsonl");
    let replayed = robonurse(&["replay", "--log", path(&log)], dir.path());
    assert!(replayed.status.success());
    assert_eq!(replayed.stdout, std::fs::read(&log).unwrap());

    let report = robonurse(&["replay", "--log", path(&log), "--report"], dir.path());
    let from_replay: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    let from_sim: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(from_replay, from_sim);
}

#[test]
fn k_larger_than_the_space_lists_everything() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = common::data("catalog.toml");
    let weights = common::data("weights.toml");
    let out = robonurse(
        &["tradeoff", "--catalog", path(&catalog), "--weights", path(&weights), "-k", "100000", "--machine"],
        dir.path(),
    );
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let listed = v["ranked"].as_array().unwrap();
    let cat = robonurse::tradeoff::load_catalog(&catalog).unwrap();
    let space: usize = robonurse::tradeoff::Slot::ALL
        .iter()
        .map(|s| cat.iter().filter(|a| a.slot == *s).count())
        .product();
    assert_eq!(v["configurations"].as_u64(), Some(space as u64));
    assert_eq!(listed.len(), space);
    let totals: Vec<f64> = listed.iter().map(|r| r["total"].as_f64().unwrap()).collect();
    assert!(totals.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn help_lists_the_flags() {
    let dir = tempfile::tempdir().unwrap();
    let sim = String::from_utf8(robonurse(&["sim", "--help"], dir.path()).stdout).unwrap();
    for flag in ["--scenario", "--seed", "--duration", "--commands", "--serve", "--port", "--data-dir"] {
        assert!(sim.contains(flag), "{flag}");
    }
    let tradeoff = String::from_utf8(robonurse(&["tradeoff", "--help"], dir.path()).stdout).unwrap();
    for flag in ["--catalog", "--weights", "-k"] {
        assert!(tradeoff.contains(flag), "{flag}");
    }
    let replay = String::from_utf8(robonurse(&["replay", "--help"], dir.path()).stdout).unwrap();
    assert!(replay.contains("--log"));
}
