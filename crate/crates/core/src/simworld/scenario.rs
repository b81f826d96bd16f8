//! Scenario files: TOML with a versioned `format` header.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::arm::{DhTable, EndEffectorState, IkParams, JointState};
use crate::careplan::MedAction;
use crate::motion::{DrivePlant, FollowerConfig, PidGains, Pose, Trajectory, Waypoint};
use crate::node::NodeId;
use crate::sensors::SensorSuite;

pub const SCENARIO_FORMAT: &str = "robonurse-scenario/1";
pub const DEFAULT_SCENARIO: &str = include_str!("../../data/scenario_default.toml");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ScenarioError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl ScenarioError {
    fn new(line: Option<usize>, message: impl Into<String>) -> Self {
        ScenarioError {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VitalKind {
    #[serde(rename = "hr")]
    HeartRate,
    #[serde(rename = "spo2")]
    Spo2,
    #[serde(rename = "temp_f")]
    TempF,
}

impl VitalKind {
    pub const ALL: [VitalKind; 3] = [VitalKind::HeartRate, VitalKind::Spo2, VitalKind::TempF];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Physiological clamp bounds.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            VitalKind::HeartRate => (30.0, 220.0),
            VitalKind::Spo2 => (50.0, 100.0),
            VitalKind::TempF => (93.0, 108.0),
        }
    }

    fn default_volatility(self) -> f64 {
        match self {
            VitalKind::HeartRate => 0.16,
            VitalKind::Spo2 => 0.04,
            VitalKind::TempF => 0.01,
        }
    }
}

/// Mean-reverting walk parameters for one vital.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VitalProcess {
    pub mean: f64,
    /// Reversion rate, 1/s.
    #[serde(default = "default_reversion")]
    pub reversion: f64,
    /// Noise scale per sqrt(second).
    #[serde(default)]
    pub volatility: Option<f64>,
}

fn default_reversion() -> f64 {
    1.0 / 300.0
}

impl VitalProcess {
    pub fn volatility_for(&self, kind: VitalKind) -> f64 {
        self.volatility.unwrap_or_else(|| kind.default_volatility())
    }
}

/// Saturating shift of a latent mean after an action is administered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedResponse {
    pub action: MedAction,
    pub vital: VitalKind,
    pub delta: f64,
    /// Seconds before the effect begins.
    pub onset: f64,
    /// Time constant, seconds.
    pub tau: f64,
}

impl MedResponse {
    /// Shift of the latent mean `elapsed` seconds after administration.
    pub fn effect(&self, elapsed: f64) -> f64 {
        let active = elapsed - self.onset;
        if active <= 0.0 {
            0.0
        } else {
            self.delta * (1.0 - (-active / self.tau).exp())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub desk: [f64; 3],
    /// Drop point for medicine on the patient desk, arm base frame.
    pub release: [f64; 3],
    /// Corridor waypoints from the dock, `[x, y]` or `[x, y, dwell]`.
    #[serde(default)]
    pub path: Vec<Vec<f64>>,
    pub hr: VitalProcess,
    pub spo2: VitalProcess,
    pub temp_f: VitalProcess,
    #[serde(default, rename = "response")]
    pub responses: Vec<MedResponse>,
}

impl NodeSpec {
    pub fn desk_pose(&self) -> Pose {
        Pose::new(self.desk[0], self.desk[1], self.desk[2])
    }

    pub fn release_point(&self) -> EndEffectorState {
        EndEffectorState::new(self.release[0], self.release[1], self.release[2])
    }

    pub fn process(&self, kind: VitalKind) -> &VitalProcess {
        match kind {
            VitalKind::HeartRate => &self.hr,
            VitalKind::Spo2 => &self.spo2,
            VitalKind::TempF => &self.temp_f,
        }
    }

    /// Dock-rooted trajectory: corridor waypoints, then the desk.
    pub fn trajectory(&self, dock: &Pose) -> Trajectory {
        let mut pts: Vec<(f64, f64, f64)> = self
            .path
            .iter()
            .map(|p| (p[0], p[1], p.get(2).copied().unwrap_or(0.0)))
            .collect();
        let desk = self.desk_pose();
        pts.push((desk.x, desk.y, 0.0));
        let mut prev = (dock.x, dock.y);
        let n = pts.len();
        let waypoints = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y, dwell))| {
                let heading = if i + 1 == n {
                    desk.heading
                } else {
                    (y - prev.1).atan2(x - prev.0)
                };
                prev = (x, y);
                Waypoint::new(x, y, heading, dwell)
            })
            .collect();
        Trajectory {
            node_id: self.id,
            waypoints,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub a: [f64; 2],
    pub b: [f64; 2],
    /// Seconds after start when the obstacle appears.
    #[serde(default)]
    pub appear_at: f64,
    /// Seconds the obstacle stays; absent means for the whole run.
    #[serde(default)]
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    /// Seconds after start, repeating daily.
    pub checkup_times: Vec<f64>,
    pub round_order: Vec<NodeId>,
}

impl Schedule {
    pub fn validate(&self) -> Result<(), String> {
        if self.checkup_times.is_empty() || self.round_order.is_empty() {
            return Err("schedule must list checkup times and a round order".into());
        }
        if self
            .checkup_times
            .iter()
            .any(|t| !t.is_finite() || *t < 0.0 || *t >= DAY_S)
        {
            return Err("checkup times must lie within one day".into());
        }
        if self.checkup_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err("checkup times must be strictly increasing".into());
        }
        let mut seen = HashSet::new();
        if !self.round_order.iter().all(|n| seen.insert(*n)) {
            return Err("round order repeats a node".into());
        }
        Ok(())
    }
}

pub const DAY_S: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatteryConfig {
    pub capacity_hours: f64,
    pub level: f64,
    /// Hours to charge from empty while docked.
    pub charge_hours: f64,
    /// Minimum level to start a round.
    pub start_threshold: f64,
    /// Level below which a round in progress is abandoned.
    pub reserve: f64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        BatteryConfig {
            capacity_hours: 1.38,
            level: 1.0,
            charge_hours: 2.0,
            start_threshold: 0.2,
            reserve: 0.1,
        }
    }
}

/// On-node activity durations other than the measurement window itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisitTiming {
    /// Positioning the probes before sampling starts.
    pub settle_s: f64,
    /// Showing results at the bedside and uploading.
    pub display_s: f64,
    /// Placing the oxygen mask.
    pub mask_s: f64,
}

impl Default for VisitTiming {
    fn default() -> Self {
        VisitTiming {
            settle_s: 10.3,
            display_s: 3.0,
            mask_s: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    #[serde(default)]
    pub table: DhTable,
    #[serde(default = "default_home")]
    pub home: [f64; 3],
    #[serde(default)]
    pub ik: IkParams,
}

fn default_home() -> [f64; 3] {
    [0.0, 1.2, -2.0]
}

impl Default for ArmConfig {
    fn default() -> Self {
        ArmConfig {
            table: DhTable::default(),
            home: default_home(),
            ik: IkParams::default(),
        }
    }
}

impl ArmConfig {
    pub fn home_state(&self) -> JointState {
        JointState::new(self.home)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    format: Spanned<String>,
    #[serde(default = "default_name")]
    name: String,
    room_id: Spanned<String>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_dt")]
    dt: Spanned<f64>,
    bounds: Spanned<[f64; 4]>,
    dock: Spanned<[f64; 3]>,
    outlets: Spanned<[[f64; 3]; 3]>,
    #[serde(default = "default_stock")]
    stock: [u32; 3],
    schedule: Spanned<Schedule>,
    #[serde(default)]
    sensors: SensorSuite,
    #[serde(default = "default_battery")]
    battery: Spanned<BatteryConfig>,
    #[serde(default)]
    timing: VisitTiming,
    #[serde(default)]
    plant: DrivePlant,
    #[serde(default)]
    gains: PidGains,
    #[serde(default)]
    follower: FollowerConfig,
    #[serde(default)]
    arm: ArmConfig,
    #[serde(default, rename = "node")]
    nodes: Vec<Spanned<NodeSpec>>,
    #[serde(default, rename = "response")]
    responses: Vec<MedResponse>,
    #[serde(default, rename = "obstacle")]
    obstacles: Vec<Spanned<ObstacleSpec>>,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_dt() -> Spanned<f64> {
    Spanned::new(0..0, 0.02)
}

fn default_battery() -> Spanned<BatteryConfig> {
    Spanned::new(0..0, BatteryConfig::default())
}

fn default_stock() -> [u32; 3] {
    [24, 24, 24]
}

/// A validated ward scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub room_id: String,
    pub seed: u64,
    pub dt: f64,
    pub bounds: [f64; 4],
    pub dock: Pose,
    pub outlets: [EndEffectorState; 3],
    pub stock: [u32; 3],
    pub schedule: Schedule,
    pub sensors: SensorSuite,
    pub battery: BatteryConfig,
    pub timing: VisitTiming,
    pub plant: DrivePlant,
    pub gains: PidGains,
    pub follower: FollowerConfig,
    pub arm: ArmConfig,
    pub nodes: Vec<NodeSpec>,
    /// Ward-wide responses; node entries override by action.
    pub responses: Vec<MedResponse>,
    pub obstacles: Vec<ObstacleSpec>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())]
        .iter()
        .filter(|b| **b == b'\n')
        .count()
        + 1
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start));
            ScenarioError::new(line, e.message().trim().to_string())
        })?;
        let at = |span: std::ops::Range<usize>| {
            if span.is_empty() && span.start == 0 {
                None
            } else {
                Some(line_of(text, span.start))
            }
        };

        if raw.format.get_ref() != SCENARIO_FORMAT {
            return Err(ScenarioError::new(
                at(raw.format.span()),
                format!(
                    "unsupported format `{}`, expected `{SCENARIO_FORMAT}`",
                    raw.format.get_ref()
                ),
            ));
        }
        let room = raw.room_id.get_ref();
        let room_ok = room.len() == 3
            && room.starts_with('R')
            && room[1..].bytes().all(|b| b.is_ascii_digit());
        if !room_ok {
            return Err(ScenarioError::new(
                at(raw.room_id.span()),
                format!("room id `{room}` must look like Rxx"),
            ));
        }
        let dt = *raw.dt.get_ref();
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ScenarioError::new(at(raw.dt.span()), "dt must be positive"));
        }
        let b = *raw.bounds.get_ref();
        if !(b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3]) {
            return Err(ScenarioError::new(at(raw.bounds.span()), "bounds must be [min_x, min_y, max_x, max_y]"));
        }
        let inside = |x: f64, y: f64| x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3];
        let d = *raw.dock.get_ref();
        if !(d.iter().all(|v| v.is_finite()) && inside(d[0], d[1])) {
            return Err(ScenarioError::new(at(raw.dock.span()), "dock must lie inside the room bounds"));
        }
        let dock = Pose::new(d[0], d[1], d[2]);

        let arm = raw.arm.clone();
        arm.table
            .validate()
            .map_err(|e| ScenarioError::new(None, format!("arm: {e}")))?;
        let (inner, outer) = arm.table.reach();
        let reachable = |p: &[f64; 3]| {
            let r = p[0].hypot(p[1]);
            p.iter().all(|v| v.is_finite()) && r >= inner && r <= outer && p[2].abs() < 1e-9
        };
        let o = raw.outlets.get_ref();
        if let Some(i) = o.iter().position(|p| !reachable(p)) {
            return Err(ScenarioError::new(
                at(raw.outlets.span()),
                format!("outlet {} is outside the arm workspace", i + 1),
            ));
        }
        let outlets = o.map(|p| EndEffectorState::new(p[0], p[1], p[2]));

        raw.schedule
            .get_ref()
            .validate()
            .map_err(|m| ScenarioError::new(at(raw.schedule.span()), m))?;
        let bat = *raw.battery.get_ref();
        let bat_ok = bat.capacity_hours > 0.0
            && bat.charge_hours > 0.0
            && (0.0..=1.0).contains(&bat.level)
            && (0.0..=1.0).contains(&bat.start_threshold)
            && (0.0..=1.0).contains(&bat.reserve);
        if !bat_ok {
            return Err(ScenarioError::new(at(raw.battery.span()), "battery values out of range"));
        }
        raw.sensors
            .optics
            .validate()
            .and(raw.sensors.thermistor.validate())
            .map_err(|e| ScenarioError::new(None, format!("sensors: {e}")))?;
        if !(0.0..0.2).contains(&raw.sensors.noise_level) {
            return Err(ScenarioError::new(None, "sensors: noise_level must be in [0, 0.2)"));
        }
        raw.plant
            .validate()
            .and(raw.gains.validate())
            .map_err(|e| ScenarioError::new(None, format!("drive: {e}")))?;

        if raw.nodes.is_empty() || raw.nodes.len() > crate::node::MAX_NODES as usize {
            return Err(ScenarioError::new(None, "a ward holds 1 to 8 nodes"));
        }
        let mut ids = HashSet::new();
        let mut nodes = Vec::with_capacity(raw.nodes.len());
        for spanned in &raw.nodes {
            let line = at(spanned.span());
            let n = spanned.get_ref();
            let err = |m: String| ScenarioError::new(line, format!("node {}: {m}", n.id));
            if !ids.insert(n.id) {
                return Err(err("duplicate id".into()));
            }
            if !(n.desk.iter().all(|v| v.is_finite()) && inside(n.desk[0], n.desk[1])) {
                return Err(err("desk must lie inside the room bounds".into()));
            }
            if !reachable(&n.release) {
                return Err(err("release point is outside the arm workspace".into()));
            }
            for p in &n.path {
                if !(p.len() == 2 || p.len() == 3) || !p.iter().all(|v| v.is_finite()) {
                    return Err(err("path entries are [x, y] or [x, y, dwell]".into()));
                }
                if !inside(p[0], p[1]) || p.get(2).is_some_and(|d| *d < 0.0) {
                    return Err(err("path leaves the room or has negative dwell".into()));
                }
            }
            for k in VitalKind::ALL {
                let proc = n.process(k);
                let (lo, hi) = k.bounds();
                if !(proc.mean >= lo && proc.mean <= hi) {
                    return Err(err(format!("{k:?} mean {} outside [{lo}, {hi}]", proc.mean)));
                }
                if !(proc.reversion > 0.0) || proc.volatility.is_some_and(|v| !(v >= 0.0)) {
                    return Err(err(format!("{k:?} reversion must be > 0, volatility >= 0")));
                }
            }
            check_responses(&n.responses).map_err(err)?;
            nodes.push(n.clone());
        }
        check_responses(&raw.responses).map_err(|m| ScenarioError::new(None, m))?;
        for n in raw.schedule.get_ref().round_order.iter() {
            if !ids.contains(n) {
                return Err(ScenarioError::new(
                    at(raw.schedule.span()),
                    format!("round order names {n}, which is not in the ward"),
                ));
            }
        }

        let mut obstacles = Vec::new();
        for spanned in &raw.obstacles {
            let o = *spanned.get_ref();
            let ok = [o.a[0], o.a[1], o.b[0], o.b[1]].iter().all(|v| v.is_finite())
                && inside(o.a[0], o.a[1])
                && inside(o.b[0], o.b[1])
                && o.appear_at >= 0.0
                && o.duration.is_none_or(|d| d > 0.0);
            if !ok {
                return Err(ScenarioError::new(
                    at(spanned.span()),
                    "obstacle must lie inside the room with a positive duration",
                ));
            }
            obstacles.push(o);
        }

        Ok(Scenario {
            name: raw.name,
            room_id: room.clone(),
            seed: raw.seed,
            dt,
            bounds: b,
            dock,
            outlets,
            stock: raw.stock,
            schedule: raw.schedule.into_inner(),
            sensors: raw.sensors,
            battery: bat,
            timing: raw.timing,
            plant: raw.plant,
            gains: raw.gains,
            follower: raw.follower,
            arm,
            nodes,
            responses: raw.responses,
            obstacles,
        })
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::new(None, format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The bundled eight-bed ward.
    pub fn default_ward() -> Scenario {
        Self::parse(DEFAULT_SCENARIO).expect("bundled scenario is valid")
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn trajectory(&self, id: NodeId) -> Option<Trajectory> {
        self.node(id).map(|n| n.trajectory(&self.dock))
    }

    /// Response of `node` to `action`: node-specific entry first, then ward-wide.
    pub fn responses_for(&self, node: &NodeSpec, action: MedAction) -> Vec<MedResponse> {
        let own: Vec<MedResponse> = node.responses.iter().filter(|r| r.action == action).copied().collect();
        if !own.is_empty() {
            return own;
        }
        self.responses.iter().filter(|r| r.action == action).copied().collect()
    }
}

fn check_responses(rs: &[MedResponse]) -> Result<(), String> {
    for r in rs {
        if !(r.tau > 0.0 && r.onset >= 0.0 && r.delta.is_finite()) {
            return Err(format!("response to {:?} needs tau > 0 and onset >= 0", r.action));
        }
    }
    Ok(())
}
