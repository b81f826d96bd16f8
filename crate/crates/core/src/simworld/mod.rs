//! Deterministic ward simulation: patients, robot body, battery, obstacles.

mod scenario;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::careplan::MedAction;
use crate::motion::{
    drive_step, Clearance, DriveBase, MotionError, Pose, TrajectoryFollower, Waypoint,
};
use crate::node::NodeId;
use crate::sensors::{measure_vitals, SensorError, VitalSigns};

pub use scenario::{
    ArmConfig, BatteryConfig, MedResponse, NodeSpec, ObstacleSpec, Scenario, ScenarioError,
    Schedule, VisitTiming, VitalKind, VitalProcess, DAY_S, DEFAULT_SCENARIO, SCENARIO_FORMAT,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("robot is {distance:.2} m from {node}'s desk, limit {limit} m")]
    OutOfRange { node: NodeId, distance: f64, limit: f64 },
    #[error("{0} is not in this ward")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

/// Maximum distance from the desk pose for a measurement.
pub const MEASURE_RANGE_M: f64 = 0.3;
/// Robot footprint radius for obstacle checks.
pub const ROBOT_RADIUS_M: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimClock {
    pub t: f64,
    pub ticks: u64,
    pub dt: f64,
    pub speed_factor: f64,
    pub seed: u64,
}

impl SimClock {
    pub fn new(dt: f64, seed: u64) -> Self {
        SimClock {
            t: 0.0,
            ticks: 0,
            dt,
            speed_factor: 1.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Battery {
    pub capacity_hours: f64,
    pub level: f64,
    pub charge_hours: f64,
}

impl Battery {
    pub fn new(cfg: &BatteryConfig) -> Self {
        Battery {
            capacity_hours: cfg.capacity_hours,
            level: cfg.level,
            charge_hours: cfg.charge_hours,
        }
    }

    /// Charges when docked, otherwise drains at the running rate.
    pub fn step(&mut self, dt: f64, docked: bool) {
        let rate = if docked {
            1.0 / (self.charge_hours * 3600.0)
        } else {
            -1.0 / (self.capacity_hours * 3600.0)
        };
        self.level = (self.level + rate * dt).clamp(0.0, 1.0);
    }

    /// Fraction of capacity used by `seconds` of running.
    pub fn cost_of(&self, seconds: f64) -> f64 {
        seconds / (self.capacity_hours * 3600.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct Administered {
    response: MedResponse,
    at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientState {
    pub id: NodeId,
    /// Current latent values, ordered as [`VitalKind::ALL`].
    pub values: [f64; 3],
    effects: Vec<Administered>,
    pub last_fluid: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Obstacle {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub from: f64,
    pub until: Option<f64>,
}

impl Obstacle {
    pub fn active_at(&self, t: f64) -> bool {
        t >= self.from && self.until.is_none_or(|u| t < u)
    }

    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let (ax, ay) = (self.a[0], self.a[1]);
        let (dx, dy) = (self.b[0] - ax, self.b[1] - ay);
        let len2 = dx * dx + dy * dy;
        let u = if len2 == 0.0 {
            0.0
        } else {
            (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
        };
        (x - ax - u * dx).hypot(y - ay - u * dy)
    }
}

struct ObstacleField<'a> {
    obstacles: &'a [Obstacle],
    t: f64,
}

impl Clearance for ObstacleField<'_> {
    /// A move is blocked when it ends inside an obstacle's footprint and
    /// does not back away from it.
    fn is_clear(&self, from: &Pose, to: &Pose) -> bool {
        self.obstacles.iter().filter(|o| o.active_at(self.t)).all(|o| {
            let d_to = o.distance(to.x, to.y);
            d_to >= ROBOT_RADIUS_M || d_to >= o.distance(from.x, from.y)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotBody {
    pub pose: Pose,
    pub base: DriveBase,
    pub follower: Option<TrajectoryFollower>,
    pub docked: bool,
    pub camera_pan: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorldEvent {
    Arrived,
    NavigationFailed(MotionError),
    ObstacleAppeared(usize),
    ObstacleCleared(usize),
}

pub struct World {
    pub scenario: Scenario,
    pub clock: SimClock,
    pub patients: Vec<PatientState>,
    pub robot: RobotBody,
    pub battery: Battery,
    pub stock: [u32; 3],
    pub obstacles: Vec<Obstacle>,
    rng: ChaCha8Rng,
}

const PATIENT_STREAM: u64 = 0x5041_5449_454e_5453;

impl World {
    pub fn new(scenario: Scenario) -> Result<World, WorldError> {
        Self::with_seed(scenario.seed, scenario)
    }

    pub fn with_seed(seed: u64, scenario: Scenario) -> Result<World, WorldError> {
        let base = DriveBase::new(scenario.plant, scenario.gains)?;
        let patients = scenario
            .nodes
            .iter()
            .map(|n| PatientState {
                id: n.id,
                values: VitalKind::ALL.map(|k| n.process(k).mean),
                effects: Vec::new(),
                last_fluid: None,
            })
            .collect();
        let obstacles = scenario
            .obstacles
            .iter()
            .map(|o| Obstacle {
                a: o.a,
                b: o.b,
                from: o.appear_at,
                until: o.duration.map(|d| o.appear_at + d),
            })
            .collect();
        Ok(World {
            clock: SimClock::new(scenario.dt, seed),
            patients,
            robot: RobotBody {
                pose: scenario.dock,
                base,
                follower: None,
                docked: true,
                camera_pan: 0.0,
            },
            battery: Battery::new(&scenario.battery),
            stock: scenario.stock,
            obstacles,
            rng: ChaCha8Rng::seed_from_u64(seed ^ PATIENT_STREAM),
            scenario,
        })
    }

    pub fn now(&self) -> f64 {
        self.clock.t
    }

    fn patient_index(&self, id: NodeId) -> Result<usize, WorldError> {
        self.patients
            .iter()
            .position(|p| p.id == id)
            .ok_or(WorldError::UnknownNode(id))
    }

    pub fn patient(&self, id: NodeId) -> Option<&PatientState> {
        self.patients.iter().find(|p| p.id == id)
    }

    /// Latent mean of one vital including active medication effects.
    pub fn latent_mean(&self, id: NodeId, kind: VitalKind) -> Option<f64> {
        let p = self.patient(id)?;
        let spec = self.scenario.node(id)?;
        Some(effective_mean(spec, p, kind, self.clock.t))
    }

    pub fn truth(&self, id: NodeId) -> Option<VitalSigns> {
        let p = self.patient(id)?;
        Some(VitalSigns {
            heart_rate: p.values[0],
            spo2: p.values[1],
            temp_f: p.values[2],
            timestamp: self.clock.t,
        })
    }

    /// One fixed step of the clock.
    pub fn step(&mut self) -> Vec<WorldEvent> {
        let dt = self.clock.dt;
        let events = self.advance(dt);
        self.clock.ticks += 1;
        self.clock.t = self.clock.ticks as f64 * dt;
        events
    }

    /// Advance by an arbitrary `dt` without touching the tick counter.
    pub fn step_by(&mut self, dt: f64) -> Vec<WorldEvent> {
        if dt <= 0.0 {
            return Vec::new();
        }
        let events = self.advance(dt);
        self.clock.t += dt;
        events
    }

    fn advance(&mut self, dt: f64) -> Vec<WorldEvent> {
        let t = self.clock.t;
        let mut events = Vec::new();
        for (i, o) in self.obstacles.iter().enumerate() {
            if o.from > t && o.from <= t + dt {
                events.push(WorldEvent::ObstacleAppeared(i));
            }
            if let Some(u) = o.until {
                if u > t && u <= t + dt {
                    events.push(WorldEvent::ObstacleCleared(i));
                }
            }
        }

        for i in 0..self.patients.len() {
            let spec = &self.scenario.nodes[i];
            for k in VitalKind::ALL {
                let proc = spec.process(k);
                let mean = effective_mean(spec, &self.patients[i], k, t);
                let z: f64 = StandardNormal.sample(&mut self.rng);
                let x = self.patients[i].values[k.index()];
                let next = x + proc.reversion * (mean - x) * dt + proc.volatility_for(k) * dt.sqrt() * z;
                let (lo, hi) = k.bounds();
                self.patients[i].values[k.index()] = next.clamp(lo, hi);
            }
        }

        if let Some(follower) = self.robot.follower.as_mut() {
            let field = ObstacleField {
                obstacles: &self.obstacles,
                t,
            };
            match drive_step(follower, &mut self.robot.base, &mut self.robot.pose, dt, &field) {
                Ok(true) => {
                    self.robot.follower = None;
                    events.push(WorldEvent::Arrived);
                }
                Ok(false) => {}
                Err(e) => {
                    self.robot.follower = None;
                    self.robot.base.stall();
                    events.push(WorldEvent::NavigationFailed(e));
                }
            }
        }
        self.battery.step(dt, self.robot.docked);
        events
    }

    pub fn start_route(&mut self, waypoints: Vec<Waypoint>) {
        self.robot.docked = false;
        self.robot.follower = Some(TrajectoryFollower::new(waypoints, self.scenario.follower));
    }

    pub fn is_navigating(&self) -> bool {
        self.robot.follower.is_some()
    }

    /// Waypoints of the active route already reached.
    pub fn route_progress(&self) -> usize {
        self.robot
            .follower
            .as_ref()
            .map(TrajectoryFollower::current_index)
            .unwrap_or(0)
    }

    pub fn at_dock(&self) -> bool {
        self.robot.pose.distance_to(&self.scenario.dock) <= MEASURE_RANGE_M
    }

    pub fn set_docked(&mut self, docked: bool) {
        self.robot.docked = docked;
    }

    /// Synthesizes raw sensor signals from the latent truth and converts them.
    pub fn measure_patient(&self, id: NodeId, seed: u64) -> Result<VitalSigns, WorldError> {
        let spec = self.scenario.node(id).ok_or(WorldError::UnknownNode(id))?;
        let distance = self.robot.pose.distance_to(&spec.desk_pose());
        if distance > MEASURE_RANGE_M {
            return Err(WorldError::OutOfRange {
                node: id,
                distance,
                limit: MEASURE_RANGE_M,
            });
        }
        let truth = self.truth(id).expect("node has a patient");
        Ok(measure_vitals(&truth, &self.scenario.sensors, seed)?)
    }

    /// Starts the responses configured for `action` on a patient.
    pub fn administer(&mut self, id: NodeId, action: MedAction) -> Result<(), WorldError> {
        let i = self.patient_index(id)?;
        let t = self.clock.t;
        let spec = &self.scenario.nodes[i];
        let responses = self.scenario.responses_for(spec, action);
        let p = &mut self.patients[i];
        p.effects
            .extend(responses.into_iter().map(|response| Administered { response, at: t }));
        if action == MedAction::Fluid {
            p.last_fluid = Some(t);
        }
        Ok(())
    }

    pub fn fluid_due(&self, id: NodeId, interval_h: f64) -> bool {
        match self.patient(id).and_then(|p| p.last_fluid) {
            None => true,
            Some(at) => self.clock.t - at >= interval_h * 3600.0,
        }
    }

    pub fn inject_obstacle(&mut self, a: [f64; 2], b: [f64; 2], duration: Option<f64>) -> usize {
        let t = self.clock.t;
        self.obstacles.push(Obstacle {
            a,
            b,
            from: t,
            until: duration.map(|d| t + d),
        });
        self.obstacles.len() - 1
    }

    /// Order-sensitive hash of the full dynamic state.
    pub fn state_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut put = |v: f64| v.to_bits().hash(&mut h);
        put(self.clock.t);
        for p in &self.patients {
            p.values.iter().for_each(|v| put(*v));
        }
        let r = &self.robot;
        [r.pose.x, r.pose.y, r.pose.heading, r.camera_pan, self.battery.level]
            .iter()
            .for_each(|v| put(*v));
        let mut h2 = h;
        self.stock.hash(&mut h2);
        h2.finish()
    }
}

fn effective_mean(spec: &NodeSpec, p: &PatientState, kind: VitalKind, t: f64) -> f64 {
    let base = spec.process(kind).mean;
    let shift: f64 = p
        .effects
        .iter()
        .filter(|e| e.response.vital == kind)
        .map(|e| e.response.effect(t - e.at))
        .sum();
    let (lo, hi) = kind.bounds();
    (base + shift).clamp(lo, hi)
}
