#![allow(dead_code)]

use std::path::{Path, PathBuf};

use robonurse::careplan::{CarePlanConfig, DEFAULT_CAREPLAN};
use robonurse::controller::Controller;
use robonurse::simworld::Scenario;
use robonurse::telemetry::{Frame, LogWriter};

pub fn careplan() -> CarePlanConfig {
    CarePlanConfig::parse(DEFAULT_CAREPLAN).unwrap()
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

pub fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

pub struct Run {
    pub ctl: Controller,
    pub frames: Vec<Frame>,
    pub log: Vec<u8>,
}

/// Runs a scenario headless with a file log and an optional command script.
pub fn run(scenario: Scenario, seed: u64, until: f64, script: &[(f64, String)]) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let mut ctl = Controller::with_seed(scenario, careplan(), seed).unwrap();
    ctl.set_writer(LogWriter::create(&path).unwrap());
    for (at, line) in script {
        ctl.submit_line(line.as_bytes(), *at);
    }
    let mut frames = Vec::new();
    while ctl.now() + 1e-9 < until {
        ctl.step();
        frames.extend(ctl.take_frames());
    }
    ctl.finish();
    frames.extend(ctl.take_frames());
    let log = std::fs::read(&path).unwrap();
    Run { ctl, frames, log }
}

pub fn run_default(seed: u64, until: f64) -> Run {
    run(Scenario::default_ward(), seed, until, &[])
}

/// `(issued_at, line)` pairs from a fixture command script.
pub fn script(name: &str) -> Vec<(f64, String)> {
    let text = std::fs::read_to_string(fixture(name)).unwrap();
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["issued_at"].as_f64().unwrap(), l.to_string())
        })
        .collect()
}

/// Compares `actual` with a committed file, or rewrites it when
/// `ROBONURSE_BLESS` is set.
pub fn check_golden(name: &str, actual: &[u8]) {
    let path = golden(name);
    if std::env::var_os("ROBONURSE_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with ROBONURSE_BLESS=1 to create)", path.display()));
    if expected != actual {
        let exp = String::from_utf8_lossy(&expected);
        let act = String::from_utf8_lossy(actual);
        for (i, (a, b)) in exp.lines().zip(act.lines()).enumerate() {
            assert_eq!(a, b, "{} differs at line {}", path.display(), i + 1);
        }
        panic!(
            "{} differs in length: {} vs {} lines",
            path.display(),
            exp.lines().count(),
            act.lines().count()
        );
    }
}

/// One line per discrete event; pose frames are left out and vitals keep
/// only patient, state and mode.
pub fn event_trace(frames: &[Frame]) -> String {
    use robonurse::telemetry::FrameBody;
    use std::fmt::Write as _;
    let mut s = String::new();
    for f in frames {
        let t = f.sim_time;
        let _ = match &f.body {
            FrameBody::Pose { .. } => continue,
            FrameBody::Vitals { patient, state, mode, .. } => {
                writeln!(s, "{t:9.2} vitals {patient} {state} {mode:?}")
            }
            FrameBody::Med { patient, item, duration, mode, .. } => {
                writeln!(s, "{t:9.2} med {patient} {item} {duration:.3} {mode:?}")
            }
            FrameBody::Mode { state, node, detail } => writeln!(
                s,
                "{t:9.2} mode {state}{}{}",
                node.map(|n| format!(" {n}")).unwrap_or_default(),
                detail.as_ref().map(|d| format!(" ({d})")).unwrap_or_default()
            ),
            FrameBody::Alert { code, patient, .. } => writeln!(
                s,
                "{t:9.2} alert {code}{}",
                patient.map(|n| format!(" {n}")).unwrap_or_default()
            ),
            FrameBody::Ack { command_id, accepted, reason, response_s } => writeln!(
                s,
                "{t:9.2} ack {} {}{}{}",
                command_id.map_or("-".to_string(), |i| i.to_string()),
                if *accepted { "accepted" } else { "rejected" },
                response_s.map(|r| format!(" {r:.3}")).unwrap_or_default(),
                reason.as_ref().map(|r| format!(" ({r})")).unwrap_or_default()
            ),
        };
    }
    s
}

/// Targets of each `navigating` mode frame, in order.
pub fn visit_order(frames: &[Frame]) -> Vec<String> {
    use robonurse::telemetry::FrameBody;
    frames
        .iter()
        .filter_map(|f| match &f.body {
            FrameBody::Mode { state, node: Some(n), .. } if state == "navigating" => Some(n.to_string()),
            _ => None,
        })
        .collect()
}
