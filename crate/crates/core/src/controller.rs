//! Routine rounds, supervisory override, actuation and logging.
//!
//! The [`Controller`] owns the simulated world and advances it one fixed
//! step at a time. Work is serviced only at state boundaries: after a node
//! visit, on dock arrival, or while idle at the dock.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use serde::Serialize;

use crate::arm::pick_and_place;
use crate::careplan::{
    actuation_profile, classify, dispense, prescribe, ActuationProfile, CarePlanConfig,
    DispenseMode, DispenseRecord, HealthState, MedAction,
};
use crate::command::{Command, CommandKind};
use crate::motion::{body_speed, path_length, route_between, Pose, Trajectory, Waypoint};
use crate::node::NodeId;
use crate::sensors::VitalSigns;
use crate::simworld::{Scenario, Schedule, World, WorldError, WorldEvent, DAY_S};
use crate::telemetry::{
    decode_command, CommandChannel, Frame, FrameBody, LatencyModel, LogWriter, Publisher,
    PublisherConfig, Rejected, SERIAL_DELAY_MS,
};

/// Interval between inbox polls, seconds.
pub const POLL_PERIOD_S: f64 = 0.5;
/// Consecutive failed log flushes before an alert is raised.
pub const LOG_FAILURE_ALERT: u32 = 3;
/// Consecutive navigation failures before the controller gives up.
const MAX_NAV_FAILURES: u32 = 3;
const EPS: f64 = 1e-9;
const LATENCY_STREAM: u64 = 0x4c41_5445_4e43_5900;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "state", content = "node", rename_all = "snake_case")]
pub enum ModeState {
    Docked,
    Navigating(NodeId),
    Measuring(NodeId),
    Dispensing(NodeId),
    Returning,
    Fault,
}

impl ModeState {
    pub fn name(&self) -> &'static str {
        match self {
            ModeState::Docked => "docked",
            ModeState::Navigating(_) => "navigating",
            ModeState::Measuring(_) => "measuring",
            ModeState::Dispensing(_) => "dispensing",
            ModeState::Returning => "returning",
            ModeState::Fault => "fault",
        }
    }

    pub fn node(&self) -> Option<NodeId> {
        match self {
            ModeState::Navigating(n) | ModeState::Measuring(n) | ModeState::Dispensing(n) => Some(*n),
            _ => None,
        }
    }

    /// Every state over the given nodes.
    pub fn all(nodes: &[NodeId]) -> Vec<ModeState> {
        let mut v = vec![ModeState::Docked, ModeState::Returning, ModeState::Fault];
        for &n in nodes {
            v.extend([ModeState::Navigating(n), ModeState::Measuring(n), ModeState::Dispensing(n)]);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModeEvent {
    /// Leave for a node.
    Depart(NodeId),
    /// Current route finished.
    Reached,
    BeginDispense,
    /// Head back along the way just travelled, or to the dock.
    Return,
    Fail,
}

impl ModeEvent {
    pub fn all(nodes: &[NodeId]) -> Vec<ModeEvent> {
        let mut v = vec![ModeEvent::Reached, ModeEvent::BeginDispense, ModeEvent::Return, ModeEvent::Fail];
        v.extend(nodes.iter().map(|&n| ModeEvent::Depart(n)));
        v
    }
}

/// Transition table. Events that do not apply leave the state unchanged.
pub fn next_mode(state: ModeState, event: ModeEvent) -> ModeState {
    use ModeEvent as E;
    use ModeState as S;
    match (state, event) {
        (S::Fault, _) => S::Fault,
        (_, E::Fail) => S::Fault,

        (S::Navigating(m), E::Depart(_)) => S::Navigating(m),
        (_, E::Depart(n)) => S::Navigating(n),

        (S::Navigating(n), E::Reached) => S::Measuring(n),
        (S::Returning, E::Reached) => S::Docked,
        (s, E::Reached) => s,

        (S::Navigating(n) | S::Measuring(n), E::BeginDispense) => S::Dispensing(n),
        (s, E::BeginDispense) => s,

        (S::Docked, E::Return) => S::Docked,
        (_, E::Return) => S::Returning,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotMode {
    pub state: ModeState,
    pub active_command: Option<Command>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HealthEntry {
    pub node: NodeId,
    pub vitals: VitalSigns,
    pub state: HealthState,
    pub mode: DispenseMode,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("log entry at {at} precedes last entry at {last}")]
pub struct OutOfOrder {
    pub at: f64,
    pub last: f64,
}

/// Append-only record of measurements and dispenses.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CareLog {
    pub health_entries: Vec<HealthEntry>,
    pub medication_entries: Vec<DispenseRecord>,
}

impl CareLog {
    pub fn append_health(&mut self, e: HealthEntry) -> Result<(), OutOfOrder> {
        if let Some(last) = self.health_entries.last() {
            if e.vitals.timestamp < last.vitals.timestamp {
                return Err(OutOfOrder {
                    at: e.vitals.timestamp,
                    last: last.vitals.timestamp,
                });
            }
        }
        self.health_entries.push(e);
        Ok(())
    }

    pub fn append_medication(&mut self, r: DispenseRecord) -> Result<(), OutOfOrder> {
        if let Some(last) = self.medication_entries.last() {
            if r.timestamp < last.timestamp {
                return Err(OutOfOrder {
                    at: r.timestamp,
                    last: last.timestamp,
                });
            }
        }
        self.medication_entries.push(r);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.health_entries.len() + self.medication_entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seconds spent in each state during a round.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PhaseTimes {
    pub navigating: f64,
    pub measuring: f64,
    pub dispensing: f64,
    pub returning: f64,
    pub docked: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.navigating + self.measuring + self.dispensing + self.returning + self.docked
    }

    fn add(&mut self, state: ModeState, dt: f64) {
        match state {
            ModeState::Navigating(_) => self.navigating += dt,
            ModeState::Measuring(_) => self.measuring += dt,
            ModeState::Dispensing(_) => self.dispensing += dt,
            ModeState::Returning => self.returning += dt,
            ModeState::Docked | ModeState::Fault => self.docked += dt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitOutcome {
    Completed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisitRecord {
    pub node: NodeId,
    pub mode: DispenseMode,
    pub command_id: Option<u64>,
    pub started: f64,
    pub finished: f64,
    pub outcome: VisitOutcome,
}

impl VisitRecord {
    pub fn checkup_s(&self) -> f64 {
        self.finished - self.started
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub started_at: f64,
    pub finished_at: f64,
    pub visited: Vec<NodeId>,
    pub skipped: Vec<NodeId>,
    pub aborted: bool,
    pub visits: Vec<VisitRecord>,
    pub phases: PhaseTimes,
}

impl RoundReport {
    pub fn duration(&self) -> f64 {
        self.finished_at - self.started_at
    }
}

#[derive(Debug, Clone)]
struct RoundProgress {
    number: u32,
    started: f64,
    remaining: VecDeque<NodeId>,
    visited: Vec<NodeId>,
    skipped: Vec<NodeId>,
    aborted: bool,
    visits: Vec<VisitRecord>,
    phases: PhaseTimes,
}

#[derive(Debug, Clone, PartialEq)]
enum Task {
    Routine,
    Checkup,
    Dispense(ActuationProfile),
    Fluid(f64),
}

#[derive(Debug, Clone)]
struct Trip {
    target: Option<NodeId>,
    task: Option<Task>,
    command: Option<u64>,
    origin: Option<NodeId>,
    route: Vec<Waypoint>,
    progress: usize,
    retreat: bool,
    started: f64,
}

#[derive(Debug, Clone)]
enum Step {
    Dwell,
    Measure { treat: bool },
    StartDispensing,
    Valve { cylinder: u8, secs: f64 },
    ArmPlace { cylinder: u8 },
    Pump { liters: f64 },
    Mask,
    Administer,
    Finish,
}

#[derive(Debug, Clone)]
struct Visit {
    node: NodeId,
    mode: DispenseMode,
    command: Option<u64>,
    started: f64,
    measured: bool,
    delivered: BTreeSet<MedAction>,
}

#[derive(Debug, thiserror::Error)]
pub enum ControllerError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("careplan: {0}")]
    Careplan(#[from] crate::careplan::CareplanError),
}

pub struct Controller {
    world: World,
    careplan: CarePlanConfig,
    schedule: Schedule,
    mode: RobotMode,
    location: Option<NodeId>,
    trip: Option<Trip>,
    visit: Option<Visit>,
    current: Option<(Step, f64)>,
    agenda: VecDeque<(Step, f64)>,
    queue: VecDeque<Command>,
    channel: CommandChannel,
    next_poll: f64,
    next_round_at: f64,
    round_pending: bool,
    rounds_started: u32,
    round: Option<RoundProgress>,
    reports: Vec<RoundReport>,
    publisher: Publisher,
    writer: Option<LogWriter>,
    log: CareLog,
    outbox: Vec<Frame>,
    emitted: u64,
    measurements: u64,
    nav_failures: u32,
}

impl Controller {
    pub fn new(scenario: Scenario, careplan: CarePlanConfig) -> Result<Self, ControllerError> {
        let seed = scenario.seed;
        Self::with_seed(scenario, careplan, seed)
    }

    pub fn with_seed(scenario: Scenario, careplan: CarePlanConfig, seed: u64) -> Result<Self, ControllerError> {
        careplan.validate()?;
        let schedule = scenario.schedule.clone();
        let world = World::with_seed(seed, scenario)?;
        let next_round_at = next_checkup(&schedule.checkup_times, -1.0);
        Ok(Controller {
            world,
            careplan,
            schedule,
            mode: RobotMode {
                state: ModeState::Docked,
                active_command: None,
            },
            location: None,
            trip: None,
            visit: None,
            current: None,
            agenda: VecDeque::new(),
            queue: VecDeque::new(),
            channel: CommandChannel::new(LatencyModel::standard(seed ^ LATENCY_STREAM)),
            next_poll: POLL_PERIOD_S,
            next_round_at,
            round_pending: false,
            rounds_started: 0,
            round: None,
            reports: Vec::new(),
            publisher: Publisher::new(PublisherConfig::default()),
            writer: None,
            log: CareLog::default(),
            outbox: Vec::new(),
            emitted: 0,
            measurements: 0,
            nav_failures: 0,
        })
    }

    pub fn set_writer(&mut self, writer: LogWriter) {
        self.writer = Some(writer);
    }

    pub fn set_latency(&mut self, latency: LatencyModel) {
        self.channel = CommandChannel::new(latency);
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn now(&self) -> f64 {
        self.world.now()
    }

    pub fn mode(&self) -> &RobotMode {
        &self.mode
    }

    pub fn log(&self) -> &CareLog {
        &self.log
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn queued(&self) -> &VecDeque<Command> {
        &self.queue
    }

    pub fn round_active(&self) -> bool {
        self.round.is_some()
    }

    /// Frames emitted so far.
    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    /// Frames emitted since the last call.
    pub fn take_frames(&mut self) -> Vec<Frame> {
        std::mem::take(&mut self.outbox)
    }

    /// Sends a command through the modeled uplink.
    pub fn submit(&mut self, cmd: Command) {
        let issued = cmd.issued_at;
        let payload = match cmd.kind.validate() {
            Ok(()) => Ok(cmd),
            Err(reason) => Err(Rejected {
                id: Some(cmd.id),
                reason,
            }),
        };
        self.channel.send(issued, payload);
    }

    /// Encoded command line issued at `issued_at`.
    pub fn submit_line(&mut self, line: &[u8], issued_at: f64) {
        self.channel.send(issued_at, decode_command(line));
    }

    /// Command that already crossed a real network.
    pub fn deliver(&mut self, payload: Result<Command, Rejected>) {
        let now = self.now();
        let payload = payload.map(|mut c| {
            c.issued_at = now;
            c
        });
        self.channel.deliver_now(now, payload);
    }

    pub fn run_until(&mut self, t_end: f64) {
        while self.now() + EPS < t_end {
            self.step();
        }
    }

    /// Writes everything still buffered to the log.
    pub fn finish(&mut self) {
        self.pump_frames();
        self.flush_log();
    }

    /// One fixed simulation step.
    pub fn step(&mut self) {
        if let Some(trip) = self.trip.as_mut() {
            if self.world.is_navigating() {
                trip.progress = self.world.route_progress();
            }
        }
        let before = self.mode.state;
        let events = self.world.step();
        let t = self.now();
        if let Some(r) = self.round.as_mut() {
            r.phases.add(before, self.world.clock.dt);
        }

        for ev in events {
            self.on_world_event(ev, t);
        }
        self.advance_agenda(t);

        if t + EPS >= self.next_poll {
            while self.next_poll <= t + EPS {
                self.next_poll += POLL_PERIOD_S;
            }
            self.poll(t);
        }

        if t + EPS >= self.next_round_at {
            self.next_round_at = next_checkup(&self.schedule.checkup_times, self.next_round_at);
            self.round_pending = true;
        }

        if self.at_boundary() {
            self.decide(t);
            self.advance_agenda(t);
        }
        self.pump_frames();
    }

    fn pump_frames(&mut self) {
        let t = self.now();
        let w = &self.world;
        self.publisher.tick(t, || FrameBody::Pose {
            x: w.robot.pose.x,
            y: w.robot.pose.y,
            heading: w.robot.pose.heading,
            battery: w.battery.level,
            camera_pan: w.robot.camera_pan,
        });
        let frames = self.publisher.drain();
        if frames.is_empty() {
            return;
        }
        self.emitted += frames.len() as u64;
        if let Some(w) = self.writer.as_mut() {
            if let Err(e) = w.append(&frames) {
                log::error!("cannot encode frame for the log: {e}");
            }
        }
        self.outbox.extend(frames);
    }

    fn flush_log(&mut self) {
        let Some(w) = self.writer.as_mut() else {
            return;
        };
        if let Err(e) = w.flush() {
            log::warn!("log flush failed: {e}");
            if w.failures() == LOG_FAILURE_ALERT {
                let msg = format!("log writes failed {LOG_FAILURE_ALERT} times, {} bytes held", w.pending_bytes());
                self.emit(FrameBody::alert("log_write_failed", msg, None));
            }
        }
    }

    fn emit(&mut self, body: FrameBody) {
        let t = self.now();
        self.publisher.emit(t, body);
    }

    fn emit_mode(&mut self, detail: Option<String>) {
        let s = self.mode.state;
        self.emit(FrameBody::Mode {
            state: s.name().into(),
            node: s.node(),
            detail,
        });
    }

    fn transition(&mut self, event: ModeEvent) {
        self.transition_with(event, None);
    }

    fn transition_with(&mut self, event: ModeEvent, detail: Option<String>) {
        let next = next_mode(self.mode.state, event);
        if next != self.mode.state {
            log::debug!("{:.2}: {:?} -> {:?}", self.now(), self.mode.state, next);
            self.mode.state = next;
            self.emit_mode(detail);
        } else if detail.is_some() {
            self.emit_mode(detail);
        }
    }

    fn fault(&mut self, message: String) {
        self.emit(FrameBody::alert("fault", message, None));
        self.trip = None;
        self.visit = None;
        self.current = None;
        self.agenda.clear();
        self.mode.active_command = None;
        if let Some(r) = self.round.as_mut() {
            let rest: Vec<NodeId> = r.remaining.drain(..).collect();
            r.skipped.extend(&rest);
            r.aborted = true;
        }
        self.transition(ModeEvent::Fail);
        self.flush_log();
    }

    fn at_boundary(&self) -> bool {
        self.trip.is_none() && self.current.is_none() && self.agenda.is_empty()
    }

    // ---- commands -------------------------------------------------------

    fn ack(&mut self, id: Option<u64>, issued_at: f64, reason: Option<String>) {
        let response_s = self.now() + SERIAL_DELAY_MS / 1000.0 - issued_at;
        self.emit(FrameBody::Ack {
            command_id: id,
            accepted: reason.is_none(),
            reason,
            response_s: Some(response_s),
        });
    }

    fn poll(&mut self, t: f64) {
        for inbound in self.channel.due(t) {
            let cmd = match inbound.payload {
                Ok(c) => c,
                Err(rej) => {
                    self.ack(rej.id, inbound.issued_at, Some(rej.reason));
                    continue;
                }
            };
            match self.accept(&cmd) {
                Ok(detail) => {
                    self.ack(Some(cmd.id), inbound.issued_at, None);
                    if let Some(d) = detail {
                        self.emit_mode(Some(format!("command {}: {d}", cmd.id)));
                    }
                }
                Err(reason) => self.ack(Some(cmd.id), inbound.issued_at, Some(reason)),
            }
        }
    }

    /// Applies immediate commands and queues the rest. `Ok(Some(_))` carries
    /// a note for commands that complete on the spot.
    fn accept(&mut self, cmd: &Command) -> Result<Option<String>, String> {
        if self.mode.state == ModeState::Fault {
            return Err("controller is in fault".into());
        }
        cmd.kind.validate()?;
        if let Some(n) = cmd.kind.node() {
            if self.world.scenario.node(n).is_none() {
                return Err(format!("unknown node {n}"));
            }
        }
        match &cmd.kind {
            CommandKind::CameraPan { degrees } => {
                self.world.robot.camera_pan = *degrees;
                Ok(Some(format!("camera at {degrees} deg")))
            }
            CommandKind::SetSchedule { checkup_times } => {
                self.schedule.checkup_times = checkup_times.clone();
                self.next_round_at = next_checkup(checkup_times, self.now());
                Ok(Some("schedule updated".into()))
            }
            CommandKind::ReloadCareplan { path } => {
                let cfg = CarePlanConfig::load(Path::new(path)).map_err(|e| e.to_string())?;
                self.careplan = cfg;
                Ok(Some("careplan reloaded".into()))
            }
            CommandKind::ReturnToDock
                if self.mode.state == ModeState::Docked && self.at_boundary() && self.round.is_none() =>
            {
                Ok(Some("already docked".into()))
            }
            k if k.is_priority() => {
                let at = self.queue.iter().take_while(|c| c.kind.is_priority()).count();
                self.queue.insert(at, cmd.clone());
                Ok(None)
            }
            _ => {
                self.queue.push_back(cmd.clone());
                Ok(None)
            }
        }
    }

    // ---- decisions ------------------------------------------------------

    fn decide(&mut self, t: f64) {
        if self.mode.state == ModeState::Fault {
            return;
        }
        if let Some(cmd) = self.queue.pop_front() {
            self.start_command(cmd, t);
            return;
        }
        self.mode.active_command = None;
        if let Some(r) = self.round.as_ref() {
            if !r.remaining.is_empty() {
                if self.world.battery.level < self.world.scenario.battery.reserve {
                    let msg = format!("battery at {:.0}%", self.world.battery.level * 100.0);
                    self.abort_round("low_battery", &msg);
                    self.go_home(t);
                    return;
                }
                let n = self.round.as_mut().expect("round").remaining.pop_front().expect("node");
                self.depart(n, Task::Routine, None, t);
                return;
            }
        }
        if self.location.is_some() || !self.world.at_dock() {
            self.go_home(t);
            return;
        }
        if self.round.is_some() {
            self.finish_round(t);
            return;
        }
        if self.round_pending {
            self.round_pending = false;
            self.start_round(t);
        }
    }

    fn start_command(&mut self, cmd: Command, t: f64) {
        log::info!("{t:.2}: servicing command {} {}", cmd.id, cmd.kind.name());
        self.mode.active_command = Some(cmd.clone());
        match cmd.kind {
            CommandKind::PriorityCheckup { node } => self.depart(node, Task::Checkup, Some(cmd.id), t),
            CommandKind::ManualDispense { node, profile } => {
                self.depart(node, Task::Dispense(profile), Some(cmd.id), t)
            }
            CommandKind::FluidSupply { node, liters } => self.depart(node, Task::Fluid(liters), Some(cmd.id), t),
            CommandKind::ReturnToDock => {
                if self.round.is_some() {
                    self.abort_round("round_aborted", "operator recalled the robot");
                }
                if self.location.is_some() || !self.world.at_dock() {
                    self.go_home(t);
                } else {
                    self.complete_command();
                }
            }
            _ => self.complete_command(),
        }
    }

    fn complete_command(&mut self) {
        if let Some(cmd) = self.mode.active_command.take() {
            self.emit_mode(Some(format!("command {} complete", cmd.id)));
            self.flush_log();
        }
    }

    fn start_round(&mut self, t: f64) {
        let need = self.estimate_round_battery();
        let cfg = self.world.scenario.battery;
        let level = self.world.battery.level;
        if level < cfg.start_threshold.max(need) {
            let msg = format!(
                "battery {:.0}% below the {:.0}% needed to start a round",
                level * 100.0,
                cfg.start_threshold.max(need) * 100.0
            );
            self.emit(FrameBody::alert("round_skipped", msg, None));
            return;
        }
        self.rounds_started += 1;
        let number = self.rounds_started;
        let order: VecDeque<NodeId> = self
            .schedule
            .round_order
            .iter()
            .copied()
            .filter(|n| self.world.scenario.node(*n).is_some())
            .collect();
        self.round = Some(RoundProgress {
            number,
            started: t,
            remaining: order,
            visited: Vec::new(),
            skipped: Vec::new(),
            aborted: false,
            visits: Vec::new(),
            phases: PhaseTimes::default(),
        });
        self.emit_mode(Some(format!("round {number} started")));
        self.decide(t);
    }

    fn abort_round(&mut self, code: &str, reason: &str) {
        let Some(r) = self.round.as_mut() else {
            return;
        };
        r.aborted = true;
        let rest: Vec<NodeId> = r.remaining.drain(..).collect();
        r.skipped.extend(&rest);
        for n in rest {
            self.emit(FrameBody::alert(code, format!("{n} skipped: {reason}"), Some(n)));
        }
    }

    fn finish_round(&mut self, t: f64) {
        let Some(r) = self.round.take() else {
            return;
        };
        let report = RoundReport {
            round: r.number,
            started_at: r.started,
            finished_at: t,
            visited: r.visited,
            skipped: r.skipped,
            aborted: r.aborted,
            visits: r.visits,
            phases: r.phases,
        };
        let word = if report.aborted { "aborted" } else { "complete" };
        self.emit_mode(Some(format!("round {} {word}", report.round)));
        log::info!(
            "round {} {word}: {} visited, {} skipped in {:.1} s",
            report.round,
            report.visited.len(),
            report.skipped.len(),
            report.duration()
        );
        self.reports.push(report);
        self.flush_log();
    }

    /// Battery fraction for a full round plus the reserve.
    fn estimate_round_battery(&self) -> f64 {
        let sc = &self.world.scenario;
        let (speed, _) = body_speed(&sc.plant, sc.follower.cruise_rpm, sc.follower.cruise_rpm);
        let speed = (speed * 0.5).max(1e-3);
        let mut from: Option<Trajectory> = None;
        let mut pose = sc.dock;
        let mut secs = 0.0;
        let dwell = sc.timing.settle_s + sc.sensors.ppg.duration_s + sc.timing.display_s + 15.0;
        for n in &self.schedule.round_order {
            let Some(to) = sc.trajectory(*n) else { continue };
            let route = route_between(from.as_ref(), Some(&to), &sc.dock);
            secs += path_length(&pose, &route) / speed + dwell;
            pose = to.last().pose;
            from = Some(to);
        }
        let back = route_between(from.as_ref(), None, &sc.dock);
        secs += path_length(&pose, &back) / speed;
        self.world.battery.cost_of(secs) + sc.battery.reserve
    }

    // ---- travel ---------------------------------------------------------

    fn trajectory_of(&self, at: Option<NodeId>) -> Option<Trajectory> {
        at.and_then(|n| self.world.scenario.trajectory(n))
    }

    fn depart(&mut self, node: NodeId, task: Task, command: Option<u64>, t: f64) {
        let from = self.trajectory_of(self.location);
        let to = self.trajectory_of(Some(node));
        let route = route_between(from.as_ref(), to.as_ref(), &self.world.scenario.dock);
        self.trip = Some(Trip {
            target: Some(node),
            task: Some(task),
            command,
            origin: self.location,
            route: route.clone(),
            progress: 0,
            retreat: false,
            started: t,
        });
        self.transition(ModeEvent::Depart(node));
        if route.is_empty() {
            self.arrive();
        } else {
            self.world.start_route(route);
        }
    }

    fn go_home(&mut self, t: f64) {
        let from = self.trajectory_of(self.location);
        let mut route = route_between(from.as_ref(), None, &self.world.scenario.dock);
        if route.is_empty() {
            route.push(Waypoint {
                pose: self.world.scenario.dock,
                dwell: 0.0,
            });
        }
        self.trip = Some(Trip {
            target: None,
            task: None,
            command: None,
            origin: self.location,
            route: route.clone(),
            progress: 0,
            retreat: false,
            started: t,
        });
        self.transition(ModeEvent::Return);
        self.world.start_route(route);
    }

    fn on_world_event(&mut self, ev: WorldEvent, t: f64) {
        match ev {
            WorldEvent::Arrived => {
                if self.trip.is_some() {
                    self.arrive();
                }
            }
            WorldEvent::NavigationFailed(e) => self.navigation_failed(e.to_string(), t),
            WorldEvent::ObstacleAppeared(i) => {
                self.emit(FrameBody::alert("obstacle", format!("obstacle {i} appeared"), None));
            }
            WorldEvent::ObstacleCleared(i) => {
                self.emit(FrameBody::alert("obstacle_cleared", format!("obstacle {i} cleared"), None));
            }
        }
    }

    fn arrive(&mut self) {
        let Some(trip) = self.trip.take() else {
            return;
        };
        self.nav_failures = 0;
        if trip.retreat {
            self.location = trip.origin;
            if trip.origin.is_none() {
                self.world.set_docked(true);
                self.transition(ModeEvent::Reached);
            }
            return;
        }
        match trip.target {
            None => {
                self.location = None;
                self.world.set_docked(true);
                self.transition(ModeEvent::Reached);
                if let Some(cmd) = &self.mode.active_command {
                    if matches!(cmd.kind, CommandKind::ReturnToDock) {
                        self.complete_command();
                    }
                }
            }
            Some(node) => {
                self.location = Some(node);
                let task = trip.task.clone().unwrap_or(Task::Routine);
                let mode = if trip.command.is_some() {
                    DispenseMode::Supervisory
                } else {
                    DispenseMode::Routine
                };
                self.visit = Some(Visit {
                    node,
                    mode,
                    command: trip.command,
                    started: trip.started,
                    measured: false,
                    delivered: BTreeSet::new(),
                });
                let timing = self.world.scenario.timing;
                let window = self.world.scenario.sensors.ppg.duration_s;
                match task {
                    Task::Routine | Task::Checkup => {
                        self.transition(ModeEvent::Reached);
                        self.agenda.push_back((Step::Dwell, timing.settle_s));
                        self.agenda.push_back((
                            Step::Measure {
                                treat: task == Task::Routine,
                            },
                            window,
                        ));
                    }
                    Task::Dispense(profile) => {
                        self.transition(ModeEvent::BeginDispense);
                        self.plan_dispense(&profile);
                        self.agenda.push_back((Step::Finish, 0.0));
                    }
                    Task::Fluid(liters) => {
                        self.transition(ModeEvent::BeginDispense);
                        let profile = ActuationProfile {
                            pump_volume: liters,
                            ..Default::default()
                        };
                        self.plan_dispense(&profile);
                        self.agenda.push_back((Step::Finish, 0.0));
                    }
                }
            }
        }
    }

    fn navigation_failed(&mut self, reason: String, t: f64) {
        let Some(trip) = self.trip.take() else {
            return;
        };
        self.nav_failures += 1;
        let target = trip.target;
        self.emit(FrameBody::alert("nav_timeout", reason.clone(), target));
        if trip.retreat || self.nav_failures >= MAX_NAV_FAILURES {
            self.fault(format!("navigation failed: {reason}"));
            return;
        }
        if let Some(n) = target {
            if trip.command.is_none() {
                if let Some(r) = self.round.as_mut() {
                    r.skipped.push(n);
                    r.visits.push(VisitRecord {
                        node: n,
                        mode: DispenseMode::Routine,
                        command_id: None,
                        started: trip.started,
                        finished: t,
                        outcome: VisitOutcome::Skipped,
                    });
                }
                self.emit(FrameBody::alert("node_skipped", format!("{n} unreachable"), Some(n)));
            } else {
                self.emit(FrameBody::alert(
                    "command_failed",
                    format!("command {} could not reach {n}", trip.command.unwrap_or(0)),
                    Some(n),
                ));
                self.mode.active_command = None;
            }
        }

        // Back along the waypoints already passed, then to where the trip began.
        let reached = trip.progress.min(trip.route.len());
        let mut back: Vec<Waypoint> = trip.route[..reached]
            .iter()
            .rev()
            .map(|w| Waypoint { dwell: 0.0, ..*w })
            .collect();
        let origin_pose = match trip.origin {
            Some(o) => self
                .trajectory_of(Some(o))
                .map(|tr| tr.last().pose)
                .unwrap_or(self.world.scenario.dock),
            None => self.world.scenario.dock,
        };
        back.push(Waypoint {
            pose: origin_pose,
            dwell: 0.0,
        });
        self.trip = Some(Trip {
            target: trip.origin,
            task: None,
            command: None,
            origin: trip.origin,
            route: back.clone(),
            progress: 0,
            retreat: true,
            started: t,
        });
        self.transition_with(ModeEvent::Return, Some("retreat".into()));
        self.world.start_route(back);
    }

    // ---- visit steps ----------------------------------------------------

    fn plan_dispense(&mut self, profile: &ActuationProfile) {
        for (i, &secs) in profile.valve_open.iter().enumerate() {
            if secs > 0.0 {
                let cylinder = i as u8 + 1;
                self.agenda.push_back((Step::Valve { cylinder, secs }, secs));
                self.agenda.push_back((Step::ArmPlace { cylinder }, 0.0));
            }
        }
        if profile.pump_volume > 0.0 {
            let secs = self.careplan.dosing.pump_seconds(profile.pump_volume);
            self.agenda.push_back((
                Step::Pump {
                    liters: profile.pump_volume,
                },
                secs,
            ));
        }
        if profile.mask_flag {
            self.agenda.push_back((Step::Mask, self.world.scenario.timing.mask_s));
        }
        self.agenda.push_back((Step::Administer, 0.0));
    }

    fn advance_agenda(&mut self, t: f64) {
        loop {
            if self.current.is_none() {
                let Some((step, dur)) = self.agenda.pop_front() else {
                    return;
                };
                let dur = self.begin_step(&step, dur, t);
                self.current = Some((step, t + dur));
            }
            let (_, end) = self.current.as_ref().expect("current step");
            if t + EPS < *end {
                return;
            }
            let (step, _) = self.current.take().expect("current step");
            self.complete_step(step, t);
            if self.mode.state == ModeState::Fault {
                return;
            }
        }
    }

    /// Start-of-step effects; returns the actual duration.
    fn begin_step(&mut self, step: &Step, dur: f64, t: f64) -> f64 {
        let Some(visit) = self.visit.as_ref() else {
            return dur;
        };
        let node = visit.node;
        match step {
            Step::Valve { cylinder, secs } => {
                let mut profile = ActuationProfile::default();
                profile.valve_open[*cylinder as usize - 1] = *secs;
                let out = dispense(&profile, node, visit.mode, t, &mut self.world.stock);
                if let Some(e) = out.stockouts.first() {
                    self.emit(FrameBody::alert("stockout", format!("{node}: {e}"), Some(node)));
                    return 0.0;
                }
                let record = out.records[0];
                self.visit.as_mut().expect("visit").delivered.insert(medicine_action(*cylinder));
                if let Err(e) = self.log.append_medication(record) {
                    log::error!("{e}");
                }
                dur
            }
            Step::ArmPlace { cylinder } => {
                if !visit.delivered.contains(&medicine_action(*cylinder)) {
                    return 0.0;
                }
                let sc = &self.world.scenario;
                let spec = sc.node(node).expect("known node");
                match pick_and_place(
                    &sc.outlets[*cylinder as usize - 1],
                    &spec.release_point(),
                    &sc.arm.home_state(),
                    &sc.arm.table,
                    &sc.arm.ik,
                ) {
                    Ok(traj) => traj.duration(),
                    Err(e) => {
                        self.emit(FrameBody::alert("arm_fault", format!("{node}: {e}"), Some(node)));
                        0.0
                    }
                }
            }
            _ => dur,
        }
    }

    fn complete_step(&mut self, step: Step, t: f64) {
        let Some(visit) = self.visit.clone() else {
            return;
        };
        let node = visit.node;
        match step {
            Step::Dwell | Step::ArmPlace { .. } => {}
            Step::Measure { treat } => self.measure(&visit, treat, t),
            Step::StartDispensing => self.transition(ModeEvent::BeginDispense),
            Step::Valve { cylinder, secs } => {
                if visit.delivered.contains(&medicine_action(cylinder)) {
                    self.emit(FrameBody::Med {
                        patient: node,
                        item: format!("M0{cylinder}"),
                        cylinder: Some(cylinder),
                        duration: secs,
                        volume_l: None,
                        mode: visit.mode,
                    });
                }
            }
            Step::Pump { liters } => {
                let secs = self.careplan.dosing.pump_seconds(liters);
                self.visit.as_mut().expect("visit").delivered.insert(MedAction::Fluid);
                self.emit(FrameBody::Med {
                    patient: node,
                    item: "fluid".into(),
                    cylinder: None,
                    duration: secs,
                    volume_l: Some(liters),
                    mode: visit.mode,
                });
            }
            Step::Mask => {
                self.visit.as_mut().expect("visit").delivered.insert(MedAction::OxygenMask);
                self.emit(FrameBody::Med {
                    patient: node,
                    item: "oxygen_mask".into(),
                    cylinder: None,
                    duration: self.world.scenario.timing.mask_s,
                    volume_l: None,
                    mode: visit.mode,
                });
            }
            Step::Administer => {
                for a in &visit.delivered {
                    if let Err(e) = self.world.administer(node, *a) {
                        log::error!("{e}");
                    }
                }
            }
            Step::Finish => self.finish_visit(t),
        }
    }

    fn measure(&mut self, visit: &Visit, treat: bool, t: f64) {
        let node = visit.node;
        self.measurements += 1;
        let seed = measurement_seed(self.world.clock.seed, self.measurements);
        let timing = self.world.scenario.timing;
        let vitals = match self.world.measure_patient(node, seed) {
            Ok(v) => v,
            Err(e) => {
                self.emit(FrameBody::alert("measurement_failed", format!("{node}: {e}"), Some(node)));
                self.agenda.push_back((Step::Finish, 0.0));
                return;
            }
        };
        let state = classify(&vitals, &self.careplan.thresholds);
        self.emit(FrameBody::Vitals {
            patient: node,
            hr: vitals.heart_rate,
            spo2: vitals.spo2,
            temp_f: vitals.temp_f,
            measured_at: t,
            state: state.label(),
            mode: visit.mode,
        });
        if let Err(e) = self.log.append_health(HealthEntry {
            node,
            vitals,
            state: state.clone(),
            mode: visit.mode,
        }) {
            log::error!("{e}");
        }
        self.visit.as_mut().expect("visit").measured = true;
        self.agenda.push_back((Step::Dwell, timing.display_s));

        if treat {
            let fluid_due = self.world.fluid_due(node, self.careplan.dosing.fluid_interval_h);
            match prescribe(&state, &self.careplan.rules, fluid_due) {
                Ok(plan) if !plan.is_none() => {
                    let profile = actuation_profile(&plan, &self.careplan.dosing);
                    if !profile.is_noop() {
                        self.agenda.push_back((Step::StartDispensing, 0.0));
                        self.plan_dispense(&profile);
                    }
                }
                Ok(_) => {}
                Err(e) => {
                    self.emit(FrameBody::alert("unknown_state", format!("{node}: {e}"), Some(node)));
                }
            }
        }
        self.agenda.push_back((Step::Finish, 0.0));
    }

    fn finish_visit(&mut self, t: f64) {
        let Some(visit) = self.visit.take() else {
            return;
        };
        let record = VisitRecord {
            node: visit.node,
            mode: visit.mode,
            command_id: visit.command,
            started: visit.started,
            finished: t,
            outcome: if visit.measured || visit.command.is_some() {
                VisitOutcome::Completed
            } else {
                VisitOutcome::Skipped
            },
        };
        if let Some(r) = self.round.as_mut() {
            if visit.command.is_none() {
                if visit.measured {
                    r.visited.push(visit.node);
                } else {
                    r.skipped.push(visit.node);
                }
            }
            r.visits.push(record);
        }
        if visit.command.is_some() {
            self.complete_command();
        }
    }
}

fn medicine_action(cylinder: u8) -> MedAction {
    match cylinder {
        1 => MedAction::M01,
        2 => MedAction::M02,
        _ => MedAction::M03,
    }
}

fn measurement_seed(seed: u64, n: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ n.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// First scheduled time strictly after `after`, with times repeating daily.
pub fn next_checkup(times: &[f64], after: f64) -> f64 {
    if times.is_empty() {
        return f64::INFINITY;
    }
    let mut day = (after / DAY_S).floor().max(0.0);
    loop {
        for &ct in times {
            let at = day * DAY_S + ct;
            if at > after + EPS {
                return at;
            }
        }
        day += 1.0;
    }
}

/// Robot pose as a convenience for callers.
pub fn pose_of(c: &Controller) -> Pose {
    c.world.robot.pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::careplan::DEFAULT_CAREPLAN;
    use crate::simworld::Scenario;

    fn nodes() -> Vec<NodeId> {
        (1..=8).map(|i| NodeId::new(i).unwrap()).collect()
    }

    #[test]
    fn transition_table_is_closed() {
        let ns = nodes();
        let states = ModeState::all(&ns);
        for &s in &states {
            for &e in &ModeEvent::all(&ns) {
                let next = next_mode(s, e);
                assert!(states.contains(&next));
                if next == ModeState::Fault && s != ModeState::Fault {
                    assert_eq!(e, ModeEvent::Fail, "{s:?} --{e:?}--> fault");
                }
                if s == ModeState::Fault {
                    assert_eq!(next, ModeState::Fault);
                }
                if next == ModeState::Docked && s != ModeState::Docked {
                    assert_eq!((s, e), (ModeState::Returning, ModeEvent::Reached));
                }
            }
        }
    }

    #[test]
    fn visit_sequence() {
        let b2 = NodeId::new(2).unwrap();
        let mut s = ModeState::Docked;
        for e in [ModeEvent::Depart(b2), ModeEvent::Reached, ModeEvent::BeginDispense, ModeEvent::Return, ModeEvent::Reached] {
            s = next_mode(s, e);
        }
        assert_eq!(s, ModeState::Docked);
        assert_eq!(next_mode(ModeState::Docked, ModeEvent::Return), ModeState::Docked);
    }

    #[test]
    fn checkup_times_repeat_daily() {
        let ts = [60.0, 1860.0];
        assert_eq!(next_checkup(&ts, -1.0), 60.0);
        assert_eq!(next_checkup(&ts, 60.0), 1860.0);
        assert_eq!(next_checkup(&ts, 1860.0), DAY_S + 60.0);
        assert_eq!(next_checkup(&[], 0.0), f64::INFINITY);
    }

    #[test]
    fn care_log_is_append_only_in_time() {
        let mut log = CareLog::default();
        assert!(log.is_empty());
        let rec = |t| DispenseRecord {
            patient: NodeId::new(1).unwrap(),
            medicine: crate::careplan::Medicine::new(1).unwrap(),
            timestamp: t,
            duration: 2.88,
            mode: DispenseMode::Routine,
        };
        log.append_medication(rec(5.0)).unwrap();
        assert_eq!(log.len(), 1);
        assert!(log.append_medication(rec(4.0)).is_err());
        log.append_medication(rec(5.0)).unwrap();
        assert_eq!(log.len(), 2);
    }

    fn controller() -> Controller {
        Controller::new(Scenario::default_ward(), CarePlanConfig::parse(DEFAULT_CAREPLAN).unwrap()).unwrap()
    }

    #[test]
    fn idle_without_schedule_emits_only_pose() {
        let mut c = controller();
        c.schedule.checkup_times = vec![DAY_S - 1.0];
        c.next_round_at = DAY_S - 1.0;
        c.run_until(10.0);
        let frames = c.take_frames();
        assert!(frames.iter().all(|f| matches!(f.body, FrameBody::Pose { .. })));
        assert_eq!(c.mode().state, ModeState::Docked);
    }

    #[test]
    fn return_to_dock_while_docked_is_acknowledged() {
        let mut c = controller();
        c.schedule.checkup_times = vec![DAY_S - 1.0];
        c.next_round_at = DAY_S - 1.0;
        c.submit(Command {
            id: 1,
            kind: CommandKind::ReturnToDock,
            issued_at: 0.0,
        });
        c.run_until(3.0);
        let acks: Vec<_> = c
            .take_frames()
            .into_iter()
            .filter_map(|f| match f.body {
                FrameBody::Ack { command_id, accepted, .. } => Some((command_id, accepted)),
                _ => None,
            })
            .collect();
        assert_eq!(acks, vec![(Some(1), true)]);
        assert_eq!(c.mode().state, ModeState::Docked);
        assert!(c.queued().is_empty());
    }

    #[test]
    fn priority_jumps_the_queue() {
        let mut c = controller();
        let mk = |id, kind| Command { id, kind, issued_at: 0.0 };
        let b = |i| NodeId::new(i).unwrap();
        c.mode.state = ModeState::Measuring(b(1));
        c.accept(&mk(1, CommandKind::FluidSupply { node: b(2), liters: 0.1 })).unwrap();
        c.accept(&mk(2, CommandKind::PriorityCheckup { node: b(3) })).unwrap();
        c.accept(&mk(3, CommandKind::ReturnToDock)).unwrap();
        c.accept(&mk(4, CommandKind::PriorityCheckup { node: b(4) })).unwrap();
        let ids: Vec<u64> = c.queued().iter().map(|c| c.id).collect();
        assert_eq!(ids, vec![2, 4, 1, 3]);
        c.mode.state = ModeState::Fault;
        assert!(c.accept(&mk(5, CommandKind::ReturnToDock)).is_err());
    }
}
