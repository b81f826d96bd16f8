//! Run summaries computed from a frame stream alone.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::node::NodeId;
use crate::telemetry::{Frame, FrameBody};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckupTiming {
    pub node: NodeId,
    pub started: f64,
    pub finished: f64,
}

impl CheckupTiming {
    pub fn seconds(&self) -> f64 {
        self.finished - self.started
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub started_at: f64,
    pub finished_at: Option<f64>,
    pub aborted: bool,
    pub avg_checkup_s: Option<f64>,
    pub avg_medication_s: Option<f64>,
    pub measurements: usize,
    pub dispenses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub frames: usize,
    pub end_time: f64,
    pub avg_checkup_s: Option<f64>,
    pub avg_medication_s: Option<f64>,
    pub avg_response_s: Option<f64>,
    pub patients_visited: usize,
    pub measurements: usize,
    pub dispenses: usize,
    pub alerts: usize,
    pub commands_accepted: usize,
    pub commands_rejected: usize,
    pub battery_remaining: Option<f64>,
    pub rounds: Vec<RoundSummary>,
    pub checkups: Vec<CheckupTiming>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Checkup spans: from leaving for a node until the next departure, return
/// or dock arrival.
pub fn checkup_timings(frames: &[Frame]) -> Vec<CheckupTiming> {
    let mut out = Vec::new();
    let mut open: Option<(NodeId, f64)> = None;
    for f in frames {
        let FrameBody::Mode { state, node, .. } = &f.body else {
            continue;
        };
        let ends = matches!(state.as_str(), "navigating" | "returning" | "docked" | "fault");
        if ends {
            if let Some((n, start)) = open.take() {
                if state != "fault" {
                    out.push(CheckupTiming {
                        node: n,
                        started: start,
                        finished: f.sim_time,
                    });
                }
            }
        }
        if state == "navigating" {
            open = node.map(|n| (n, f.sim_time));
        }
    }
    out
}

fn round_marker(detail: &str) -> Option<(u32, &str)> {
    let rest = detail.strip_prefix("round ")?;
    let (num, word) = rest.split_once(' ')?;
    Some((num.parse().ok()?, word))
}

fn measured_at(f: &Frame) -> f64 {
    match &f.body {
        FrameBody::Vitals { measured_at, .. } => *measured_at,
        _ => f.sim_time,
    }
}

impl RunReport {
    pub fn from_frames(frames: &[Frame]) -> RunReport {
        let checkups = checkup_timings(frames);
        let med_durations: Vec<(f64, f64)> = frames
            .iter()
            .filter_map(|f| match &f.body {
                FrameBody::Med {
                    cylinder: Some(_),
                    duration,
                    ..
                } => Some((f.sim_time, *duration)),
                _ => None,
            })
            .collect();
        let responses = frames.iter().filter_map(|f| match &f.body {
            FrameBody::Ack { response_s, .. } => *response_s,
            _ => None,
        });
        let mut patients = BTreeSet::new();
        let mut measurements = 0;
        let mut alerts = 0;
        let mut accepted = 0;
        let mut rejected = 0;
        let mut battery = None;
        for f in frames {
            match &f.body {
                FrameBody::Vitals { patient, .. } => {
                    patients.insert(*patient);
                    measurements += 1;
                }
                FrameBody::Alert { .. } => alerts += 1,
                FrameBody::Ack { accepted: true, .. } => accepted += 1,
                FrameBody::Ack { accepted: false, .. } => rejected += 1,
                FrameBody::Pose { battery: b, .. } => battery = Some(*b),
                _ => {}
            }
        }

        let mut rounds: Vec<RoundSummary> = Vec::new();
        for f in frames {
            let FrameBody::Mode { detail: Some(d), .. } = &f.body else {
                continue;
            };
            let Some((n, word)) = round_marker(d) else {
                continue;
            };
            match word {
                "started" => rounds.push(RoundSummary {
                    round: n,
                    started_at: f.sim_time,
                    finished_at: None,
                    aborted: false,
                    avg_checkup_s: None,
                    avg_medication_s: None,
                    measurements: 0,
                    dispenses: 0,
                }),
                "complete" | "aborted" => {
                    if let Some(r) = rounds.iter_mut().rev().find(|r| r.round == n) {
                        r.finished_at = Some(f.sim_time);
                        r.aborted = word == "aborted";
                    }
                }
                _ => {}
            }
        }
        for r in &mut rounds {
            let end = r.finished_at.unwrap_or(f64::INFINITY);
            let within = |t: f64| t >= r.started_at && t <= end;
            r.avg_checkup_s = mean(checkups.iter().filter(|c| within(c.started)).map(CheckupTiming::seconds));
            let meds: Vec<f64> = med_durations.iter().filter(|(t, _)| within(*t)).map(|(_, d)| *d).collect();
            r.dispenses = meds.len();
            r.avg_medication_s = mean(meds);
            r.measurements = frames
                .iter()
                .filter(|f| matches!(f.body, FrameBody::Vitals { .. }) && within(measured_at(f)))
                .count();
        }

        RunReport {
            frames: frames.len(),
            end_time: frames.last().map_or(0.0, |f| f.sim_time),
            avg_checkup_s: mean(checkups.iter().map(CheckupTiming::seconds)),
            avg_medication_s: mean(med_durations.iter().map(|(_, d)| *d)),
            avg_response_s: mean(responses),
            patients_visited: patients.len(),
            measurements,
            dispenses: med_durations.len(),
            alerts,
            commands_accepted: accepted,
            commands_rejected: rejected,
            battery_remaining: battery,
            rounds,
            checkups,
        }
    }

    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>, unit: &str| v.map_or("-".to_string(), |x| format!("{x:.2} {unit}"));
        let mut s = String::new();
        let rows = [
            ("avg checkup time", opt(self.avg_checkup_s, "s")),
            ("avg medication time", opt(self.avg_medication_s, "s")),
            ("avg response time", opt(self.avg_response_s, "s")),
            ("patients visited", self.patients_visited.to_string()),
            ("measurements", self.measurements.to_string()),
            ("dispenses", self.dispenses.to_string()),
            ("alerts", self.alerts.to_string()),
            (
                "commands accepted/rejected",
                format!("{}/{}", self.commands_accepted, self.commands_rejected),
            ),
            (
                "battery remaining",
                self.battery_remaining.map_or("-".into(), |b| format!("{:.1} %", b * 100.0)),
            ),
            ("frames", self.frames.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<28}{v:>14}");
        }
        if !self.rounds.is_empty() {
            let _ = writeln!(s, "\nround   start      end  checkup  medication  measured  dispensed");
            for r in &self.rounds {
                let end = r.finished_at.map_or("-".into(), |t| format!("{t:.1}"));
                let _ = writeln!(
                    s,
                    "{:>5} {:>7.1} {:>8} {:>8} {:>11} {:>9} {:>10}{}",
                    r.round,
                    r.started_at,
                    end,
                    r.avg_checkup_s.map_or("-".into(), |x| format!("{x:.2}")),
                    r.avg_medication_s.map_or("-".into(), |x| format!("{x:.2}")),
                    r.measurements,
                    r.dispenses,
                    if r.aborted { "  aborted" } else { "" }
                );
            }
        }
        s
    }
}
