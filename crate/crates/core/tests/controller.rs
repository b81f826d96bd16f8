mod common;

use std::collections::BTreeMap;

use robonurse::controller::{ModeState, VisitOutcome};
use robonurse::node::NodeId;
use robonurse::simworld::Scenario;
use robonurse::telemetry::{Frame, FrameBody};

fn node(i: u8) -> NodeId {
    NodeId::new(i).unwrap()
}

fn alerts<'a>(frames: &'a [Frame], code: &str) -> Vec<&'a Frame> {
    frames
        .iter()
        .filter(|f| matches!(&f.body, FrameBody::Alert { code: c, .. } if c == code))
        .collect()
}

fn valve_events(frames: &[Frame]) -> Vec<(NodeId, u8, f64)> {
    frames
        .iter()
        .filter_map(|f| match &f.body {
            FrameBody::Med {
                patient,
                cylinder: Some(c),
                duration,
                ..
            } => Some((*patient, *c, *duration)),
            _ => None,
        })
        .collect()
}

fn cmd(id: u64, kind: &str, params: &str, at: f64) -> (f64, String) {
    (
        at,
        format!(r#"{{"v":"v1","type":"cmd","id":{id},"kind":"{kind}","params":{params},"issued_at":{at}}}"#),
    )
}

#[test]
fn default_round_stream_matches_golden() {
    let run = common::run_default(42, 400.0);
    common::check_golden("default_round.jsonl", &run.log);
}

#[test]
fn same_script_gives_identical_logs() {
    let script = vec![
        cmd(1, "camera_pan", r#"{"degrees":-12.5}"#, 30.0),
        cmd(2, "priority_checkup", r#"{"node":"B07"}"#, 150.0),
        cmd(3, "fluid_supply", r#"{"node":"B01","liters":0.1}"#, 200.0),
    ];
    let a = common::run(Scenario::default_ward(), 9, 500.0, &script);
    let b = common::run(Scenario::default_ward(), 9, 500.0, &script);
    assert_eq!(a.log, b.log);
    let c = common::run(Scenario::default_ward(), 10, 500.0, &script);
    assert_ne!(a.log, c.log);
}

#[test]
fn log_conservation_over_two_rounds() {
    let run = common::run_default(42, 2300.0);
    let reports = run.ctl.reports();
    assert_eq!(reports.len(), 2);
    let log = run.ctl.log();
    for r in reports {
        let inside = |t: f64| t >= r.started_at && t <= r.finished_at;
        let health = log.health_entries.iter().filter(|e| inside(e.vitals.timestamp)).count();
        assert_eq!(health, r.visited.len(), "round {}", r.round);
        assert_eq!(health, 8);
        let meds = log.medication_entries.iter().filter(|m| inside(m.timestamp)).count();
        let valves = run
            .frames
            .iter()
            .filter(|f| inside(f.sim_time) && matches!(f.body, FrameBody::Med { cylinder: Some(_), .. }))
            .count();
        assert_eq!(meds, valves, "round {}", r.round);
        assert!((r.phases.total() - r.duration()).abs() <= run.ctl.world().scenario.dt + 1e-9);
    }
    assert_eq!(log.medication_entries.len(), valve_events(&run.frames).len());
    let vitals = run.frames.iter().filter(|f| matches!(f.body, FrameBody::Vitals { .. })).count();
    assert_eq!(vitals, log.health_entries.len());
}

#[test]
fn b03_fever_gets_one_dose_of_m01() {
    let run = common::run_default(42, 400.0);
    let b03: Vec<_> = valve_events(&run.frames).into_iter().filter(|e| e.0 == node(3)).collect();
    assert_eq!(b03.len(), 1);
    assert_eq!(b03[0].1, 1);
    assert!((b03[0].2 - 2.88).abs() < 1e-12);
}

#[test]
fn healthy_ward_dispenses_nothing() {
    let mut sc = Scenario::default_ward();
    for n in &mut sc.nodes {
        n.hr.mean = 75.0;
        n.spo2.mean = 98.0;
        n.temp_f.mean = 98.4;
    }
    let run = common::run(sc, 42, 400.0, &[]);
    assert_eq!(run.ctl.reports()[0].visited.len(), 8);
    assert!(run.frames.iter().all(|f| !matches!(f.body, FrameBody::Med { .. })));
    assert!(run.ctl.log().medication_entries.is_empty());
    assert!(run
        .frames
        .iter()
        .all(|f| !matches!(&f.body, FrameBody::Mode { state, .. } if state == "dispensing")));
}

#[test]
fn round_leaves_most_of_the_battery() {
    let run = common::run_default(42, 300.0);
    let r = &run.ctl.reports()[0];
    assert!(r.duration() > 180.0 && r.duration() < 330.0, "{}", r.duration());
    let report = robonurse::report::RunReport::from_frames(&run.frames);
    assert!(report.battery_remaining.unwrap() > 0.8);
}

#[test]
fn battery_below_threshold_skips_the_round() {
    let mut sc = Scenario::default_ward();
    sc.battery.level = 0.15;
    let run = common::run(sc, 42, 200.0, &[]);
    assert_eq!(alerts(&run.frames, "round_skipped").len(), 1);
    assert!(common::visit_order(&run.frames).is_empty());
    assert!(run.ctl.reports().is_empty());
    assert_eq!(run.ctl.mode().state, ModeState::Docked);
}

#[test]
fn low_battery_mid_round_aborts_with_a_skip_per_node() {
    let mut sc = Scenario::default_ward();
    sc.battery.level = 0.9;
    let mut ctl = robonurse::controller::Controller::with_seed(sc, common::careplan(), 42).unwrap();
    let mut frames = Vec::new();
    ctl.run_until(140.0);
    frames.extend(ctl.take_frames());
    ctl.world_mut().battery.level = 0.05;
    ctl.run_until(400.0);
    ctl.finish();
    frames.extend(ctl.take_frames());

    let r = &ctl.reports()[0];
    assert!(r.aborted);
    assert_eq!(r.visited.len() + r.skipped.len(), 8);
    assert!(!r.skipped.is_empty());
    let skipped: Vec<NodeId> = alerts(&frames, "low_battery")
        .iter()
        .filter_map(|f| match &f.body {
            FrameBody::Alert { patient, .. } => *patient,
            _ => None,
        })
        .collect();
    assert_eq!(skipped, r.skipped);
    assert!(ctl.world().at_dock());
    let report = robonurse::report::RunReport::from_frames(&frames);
    assert!(report.rounds[0].aborted);
}

#[test]
fn blocked_desk_times_out_and_round_continues() {
    let mut ctl = robonurse::controller::Controller::with_seed(Scenario::default_ward(), common::careplan(), 42).unwrap();
    // Across the approach from the corridor to the B03 desk.
    ctl.world_mut().inject_obstacle([7.0, 4.9], [8.0, 4.9], None);
    ctl.run_until(700.0);
    ctl.finish();
    let frames = ctl.take_frames();
    assert!(!alerts(&frames, "nav_timeout").is_empty());
    let skipped = alerts(&frames, "node_skipped");
    assert_eq!(skipped.len(), 1);
    assert!(matches!(&skipped[0].body, FrameBody::Alert { patient: Some(p), .. } if *p == node(3)));
    let r = &ctl.reports()[0];
    assert_eq!(r.skipped, vec![node(3)]);
    assert_eq!(r.visited.len(), 7);
    assert!(r.visits.iter().any(|v| v.node == node(3) && v.outcome == VisitOutcome::Skipped));
    assert_ne!(ctl.mode().state, ModeState::Fault);
}

#[test]
fn invalid_and_unknown_nodes_are_rejected() {
    let mut sc = Scenario::default_ward();
    sc.nodes.retain(|n| n.id != node(8));
    sc.schedule.round_order.retain(|n| *n != node(8));
    let script = vec![
        cmd(1, "priority_checkup", r#"{"node":"B09"}"#, 10.0),
        cmd(2, "priority_checkup", r#"{"node":"B08"}"#, 10.0),
        cmd(3, "camera_pan", r#"{"degrees":31}"#, 10.0),
        cmd(4, "priority_checkup", r#"{"node":"B02"}"#, 10.0),
    ];
    let run = common::run(sc, 42, 60.0, &script);
    let acks: BTreeMap<u64, (bool, Option<String>)> = run
        .frames
        .iter()
        .filter_map(|f| match &f.body {
            FrameBody::Ack {
                command_id: Some(id),
                accepted,
                reason,
                ..
            } => Some((*id, (*accepted, reason.clone()))),
            _ => None,
        })
        .collect();
    assert_eq!(acks.len(), 4);
    assert!(!acks[&1].0);
    assert!(!acks[&2].0);
    assert!(acks[&2].1.as_deref().unwrap().contains("B08"));
    assert!(!acks[&3].0);
    assert!(acks[&4].0);
    assert_eq!(common::visit_order(&run.frames)[0], "B02");
}

#[test]
fn dispensing_is_not_interrupted() {
    // Arrives while B02 is being dosed.
    let script = vec![cmd(1, "priority_checkup", r#"{"node":"B07"}"#, 105.5)];
    let run = common::run(Scenario::default_ward(), 42, 400.0, &script);
    let events: Vec<(f64, String)> = run
        .frames
        .iter()
        .filter_map(|f| match &f.body {
            FrameBody::Med { patient, item, .. } => Some((f.sim_time, format!("med {patient} {item}"))),
            FrameBody::Mode { state, node: Some(n), .. } if state == "navigating" => {
                Some((f.sim_time, format!("nav {n}")))
            }
            _ => None,
        })
        .collect();
    let to_b07 = events.iter().position(|e| e.1 == "nav B07").unwrap();
    let b02_meds: Vec<usize> = events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.1.starts_with("med B02"))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(b02_meds.len(), 2);
    assert!(b02_meds.iter().all(|&i| i < to_b07));
    for (p, _, d) in valve_events(&run.frames) {
        assert!((d - 2.88).abs() < 1e-12, "{p} valve {d}");
    }
    let order = common::visit_order(&run.frames);
    assert_eq!(&order[..4], &["B01", "B02", "B07", "B03"]);
}

#[test]
fn every_command_gets_exactly_one_ack() {
    let script: Vec<(f64, String)> = (1..=20)
        .map(|i| cmd(i, "camera_pan", &format!(r#"{{"degrees":{}}}"#, i as f64 - 10.0), i as f64 * 13.0))
        .chain([cmd(21, "return_to_dock", "{}", 5.0), cmd(22, "set_schedule", r#"{"checkup_times":[60,900]}"#, 20.0)])
        .collect();
    let run = common::run(Scenario::default_ward(), 42, 400.0, &script);
    let mut ids: Vec<u64> = run
        .frames
        .iter()
        .filter_map(|f| match &f.body {
            FrameBody::Ack { command_id, .. } => *command_id,
            _ => None,
        })
        .collect();
    ids.sort();
    assert_eq!(ids, (1..=22).collect::<Vec<_>>());
}

#[test]
fn stream_times_and_sequence_are_monotonic() {
    let run = common::run_default(42, 400.0);
    assert!(run.frames.windows(2).all(|w| w[1].seq == w[0].seq + 1));
    assert!(run.frames.windows(2).all(|w| w[1].sim_time >= w[0].sim_time));
    let log = run.ctl.log();
    assert!(log.health_entries.windows(2).all(|w| w[1].vitals.timestamp >= w[0].vitals.timestamp));
}
