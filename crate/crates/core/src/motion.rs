//! Differential-drive base: per-wheel speed PID, first-order motor plant,
//! waypoint pursuit and trajectory inversion.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::node::NodeId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MotionError {
    #[error("controller fault: {0}")]
    ControllerFault(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("navigation timeout at waypoint {waypoint} after {stalled_s:.1} s without progress")]
    NavigationTimeout { waypoint: usize, stalled_s: f64 },
}

pub type Result<T> = std::result::Result<T, MotionError>;

/// Discrete PID gains with PWM duty bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Sampling period, seconds.
    pub ts: f64,
    pub output_min: f64,
    pub output_max: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 0.5,
            ki: 5.0,
            kd: 0.005,
            ts: 0.02,
            output_min: 0.0,
            output_max: 255.0,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.kp, self.ki, self.kd, self.ts, self.output_min, self.output_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(MotionError::ControllerFault("non-finite gain".into()));
        }
        if self.ts <= 0.0 {
            return Err(MotionError::ControllerFault("ts must be positive".into()));
        }
        if self.output_min >= self.output_max {
            return Err(MotionError::ControllerFault("output_min must be below output_max".into()));
        }
        if self.kp < 0.0 || self.ki < 0.0 || self.kd < 0.0 {
            return Err(MotionError::ControllerFault("gains must be non-negative".into()));
        }
        Ok(())
    }
}

/// Encoder feedback and controller memory for one wheel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WheelState {
    pub speed_rpm: f64,
    pub pwm: f64,
    pub error: f64,
    /// RPM * s.
    pub error_integral: f64,
    pub last_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidStep {
    /// Unclamped controller output.
    pub raw: f64,
    /// Duty after clamping to the output bounds.
    pub pwm: f64,
    pub state: WheelState,
}

/// One controller update: `e = setpoint - measured`, PID on `e`, clamp to the
/// duty range. The integral is not advanced while the output is saturated in
/// the direction the error pushes (conditional-integration anti-windup).
pub fn pid_step(state: &WheelState, setpoint: f64, measured: f64, gains: &PidGains) -> Result<PidStep> {
    gains.validate()?;
    if !setpoint.is_finite() || !measured.is_finite() {
        return Err(MotionError::ControllerFault("non-finite setpoint or measurement".into()));
    }
    let e = setpoint - measured;
    let derivative = (e - state.last_error) / gains.ts;
    let mut integral = state.error_integral + e * gains.ts;
    let mut raw = gains.kp * e + gains.ki * integral + gains.kd * derivative;
    let winding_up = (raw > gains.output_max && e > 0.0) || (raw < gains.output_min && e < 0.0);
    if winding_up {
        integral = state.error_integral;
        raw = gains.kp * e + gains.ki * integral + gains.kd * derivative;
    }
    if !raw.is_finite() {
        return Err(MotionError::ControllerFault("controller output diverged".into()));
    }
    let pwm = raw.clamp(gains.output_min, gains.output_max);
    Ok(PidStep {
        raw,
        pwm,
        state: WheelState {
            speed_rpm: measured,
            pwm,
            error: e,
            error_integral: integral,
            last_error: e,
        },
    })
}

/// First-order DC motor and differential-drive geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrivePlant {
    /// Meters; 390 RPM maps to 1.74 m/s.
    pub wheel_radius: f64,
    pub max_motor_rpm: f64,
    /// Seconds.
    pub motor_time_constant: f64,
    /// No-load RPM per duty unit.
    pub pwm_to_rpm_gain: f64,
    /// Meters between wheel contact points.
    pub track_width: f64,
}

impl Default for DrivePlant {
    fn default() -> Self {
        Self {
            wheel_radius: 0.0426,
            max_motor_rpm: 390.0,
            motor_time_constant: 0.1,
            pwm_to_rpm_gain: 2.0,
            track_width: 0.30,
        }
    }
}

impl DrivePlant {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.wheel_radius,
            self.max_motor_rpm,
            self.motor_time_constant,
            self.pwm_to_rpm_gain,
            self.track_width,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(MotionError::ControllerFault("drive plant parameters must be positive".into()))
        }
    }

    /// Body speed at full motor speed, m/s.
    pub fn max_speed(&self) -> f64 {
        rpm_to_rad_s(self.max_motor_rpm) * self.wheel_radius
    }
}

pub fn rpm_to_rad_s(rpm: f64) -> f64 {
    rpm * 2.0 * PI / 60.0
}

/// Advances a wheel's speed by `dt` toward `pwm_to_rpm_gain * pwm`, capped at
/// `max_motor_rpm`. Exact zero-order-hold solution of the first-order lag.
pub fn plant_step(plant: &DrivePlant, pwm: f64, current_rpm: f64, dt: f64) -> f64 {
    let target = (plant.pwm_to_rpm_gain * pwm).clamp(-plant.max_motor_rpm, plant.max_motor_rpm);
    lag_toward(plant, target, current_rpm, dt)
}

fn lag_toward(plant: &DrivePlant, target: f64, current_rpm: f64, dt: f64) -> f64 {
    if dt <= 0.0 {
        return current_rpm;
    }
    let alpha = 1.0 - (-dt / plant.motor_time_constant).exp();
    current_rpm + (target - current_rpm) * alpha
}

/// Linear (m/s) and angular (rad/s, counter-clockwise positive) body speed.
pub fn body_speed(plant: &DrivePlant, left_rpm: f64, right_rpm: f64) -> (f64, f64) {
    let wl = rpm_to_rad_s(left_rpm);
    let wr = rpm_to_rad_s(right_rpm);
    let v = plant.wheel_radius * (wl + wr) / 2.0;
    let omega = plant.wheel_radius * (wr - wl) / plant.track_width;
    (v, omega)
}

/// One driven wheel: PID on speed magnitude plus a direction line, as with an
/// H-bridge driver taking unsigned duty.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wheel {
    pub state: WheelState,
    forward: bool,
    /// Signed encoder speed, RPM.
    pub rpm: f64,
}

impl Wheel {
    pub fn step(&mut self, setpoint_rpm: f64, gains: &PidGains, plant: &DrivePlant, dt: f64) -> Result<f64> {
        let forward = if setpoint_rpm > 0.0 {
            true
        } else if setpoint_rpm < 0.0 {
            false
        } else {
            self.forward
        };
        if forward != self.forward {
            self.forward = forward;
            self.state.error_integral = 0.0;
            self.state.last_error = 0.0;
        }
        let sign = if self.forward { 1.0 } else { -1.0 };
        let step = pid_step(&self.state, setpoint_rpm.abs(), self.rpm * sign, gains)?;
        self.state = step.state;
        self.rpm = plant_step(plant, sign * step.pwm, self.rpm, dt);
        Ok(self.rpm)
    }

    /// Wheel held still (blocked); the encoder reads zero.
    pub fn stall(&mut self) {
        self.rpm = 0.0;
    }
}

/// Both wheels, their controller and the plant.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveBase {
    pub plant: DrivePlant,
    pub gains: PidGains,
    pub left: Wheel,
    pub right: Wheel,
}

impl DriveBase {
    pub fn new(plant: DrivePlant, gains: PidGains) -> Result<Self> {
        plant.validate()?;
        gains.validate()?;
        Ok(Self {
            plant,
            gains,
            left: Wheel::default(),
            right: Wheel::default(),
        })
    }

    /// Runs both wheel loops for `dt` and returns the resulting body speed.
    pub fn step(&mut self, left_setpoint: f64, right_setpoint: f64, dt: f64) -> Result<(f64, f64)> {
        let l = self.left.step(left_setpoint, &self.gains, &self.plant, dt)?;
        let r = self.right.step(right_setpoint, &self.gains, &self.plant, dt)?;
        Ok(body_speed(&self.plant, l, r))
    }

    pub fn stall(&mut self) {
        self.left.stall();
        self.right.stall();
    }

    pub fn is_moving(&self) -> bool {
        self.left.rpm.abs() > 1e-6 || self.right.rpm.abs() > 1e-6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians, counter-clockwise from +x.
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (other.x - self.x).hypot(other.y - self.y)
    }

    /// Euler step with midpoint heading.
    pub fn integrate(&self, v: f64, omega: f64, dt: f64) -> Pose {
        let mid = self.heading + 0.5 * omega * dt;
        Pose {
            x: self.x + v * mid.cos() * dt,
            y: self.y + v * mid.sin() * dt,
            heading: wrap_angle(self.heading + omega * dt),
        }
    }
}

/// Wraps to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    } else if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub pose: Pose,
    /// Seconds to hold position on arrival.
    #[serde(default)]
    pub dwell: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, heading: f64, dwell: f64) -> Self {
        Self {
            pose: Pose::new(x, y, heading),
            dwell,
        }
    }
}

/// A stored path from the dock to one patient node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub node_id: NodeId,
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    pub fn new(node_id: NodeId, waypoints: Vec<Waypoint>) -> Result<Self> {
        let t = Self { node_id, waypoints };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(MotionError::InvalidTrajectory(format!("{}: no waypoints", self.node_id)));
        }
        for (i, w) in self.waypoints.iter().enumerate() {
            let p = w.pose;
            if ![p.x, p.y, p.heading, w.dwell].iter().all(|v| v.is_finite()) {
                return Err(MotionError::InvalidTrajectory(format!(
                    "{}: waypoint {i} not finite",
                    self.node_id
                )));
            }
            if w.dwell < 0.0 {
                return Err(MotionError::InvalidTrajectory(format!(
                    "{}: waypoint {i} has negative dwell",
                    self.node_id
                )));
            }
        }
        Ok(())
    }

    pub fn last(&self) -> &Waypoint {
        self.waypoints.last().expect("validated trajectory is nonempty")
    }

    /// Path length from `start` through every waypoint, meters.
    pub fn length_from(&self, start: &Pose) -> f64 {
        path_length(start, &self.waypoints)
    }
}

pub fn path_length(start: &Pose, waypoints: &[Waypoint]) -> f64 {
    let mut prev = *start;
    let mut total = 0.0;
    for w in waypoints {
        total += prev.distance_to(&w.pose);
        prev = w.pose;
    }
    total
}

fn flip_heading(h: f64) -> f64 {
    if h > 0.0 {
        h - PI
    } else {
        h + PI
    }
}

/// Reverses the waypoint order and turns every heading around.
pub fn invert_trajectory(traj: &Trajectory) -> Trajectory {
    Trajectory {
        node_id: traj.node_id,
        waypoints: traj
            .waypoints
            .iter()
            .rev()
            .map(|w| Waypoint {
                pose: Pose::new(w.pose.x, w.pose.y, flip_heading(w.pose.heading)),
                dwell: w.dwell,
            })
            .collect(),
    }
}

const SAME_POINT_M: f64 = 1e-9;

fn same_point(a: &Waypoint, b: &Waypoint) -> bool {
    (a.pose.x - b.pose.x).abs() <= SAME_POINT_M && (a.pose.y - b.pose.y).abs() <= SAME_POINT_M
}

/// Waypoints that take the robot from one location to another along the
/// stored trajectories. Trajectories all start at the dock and may share a
/// leading corridor; moving between nodes backs out along the inverse of the
/// origin's trajectory to the last shared waypoint, then follows the
/// destination's trajectory from there. `None` means the dock.
pub fn route_between(from: Option<&Trajectory>, to: Option<&Trajectory>, dock: &Pose) -> Vec<Waypoint> {
    let dock_wp = Waypoint {
        pose: *dock,
        dwell: 0.0,
    };
    match (from, to) {
        (None, None) => Vec::new(),
        (None, Some(t)) => t.waypoints.clone(),
        (Some(f), None) => {
            let mut back: Vec<Waypoint> = invert_trajectory(f).waypoints.into_iter().skip(1).collect();
            for w in &mut back {
                w.dwell = 0.0;
            }
            back.push(dock_wp);
            back
        }
        (Some(f), Some(t)) if f.node_id == t.node_id => Vec::new(),
        (Some(f), Some(t)) => {
            let shared = f
                .waypoints
                .iter()
                .zip(&t.waypoints)
                .take_while(|(a, b)| same_point(a, b))
                .count();
            let shared = shared.min(f.waypoints.len() - 1);
            let inv = invert_trajectory(f);
            // Inverse without the current position, down to the branch point.
            let mut route: Vec<Waypoint> = inv.waypoints[1..f.waypoints.len() - shared]
                .iter()
                .map(|w| Waypoint { dwell: 0.0, ..*w })
                .collect();
            if shared == 0 {
                route.push(dock_wp);
            } else {
                let mut branch = f.waypoints[shared - 1];
                branch.dwell = 0.0;
                route.push(branch);
            }
            route.extend_from_slice(&t.waypoints[shared..]);
            route
        }
    }
}

/// Pursuit tuning for [`TrajectoryFollower`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FollowerConfig {
    pub cruise_rpm: f64,
    pub turn_rpm: f64,
    pub position_tolerance: f64,
    pub heading_tolerance: f64,
    /// Seconds without progress before giving up.
    pub stall_timeout: f64,
}

impl Default for FollowerConfig {
    fn default() -> Self {
        Self {
            cruise_rpm: 390.0,
            turn_rpm: 150.0,
            position_tolerance: 0.05,
            heading_tolerance: 0.1,
            stall_timeout: 30.0,
        }
    }
}

/// Heading error above which the follower stops and turns in place.
const TURN_ENTER: f64 = 0.15;
/// Heading error below which turning in place ends.
const TURN_EXIT: f64 = 0.03;
/// Distance over which the drive speed ramps down, meters.
const SLOWDOWN_M: f64 = 0.5;
const MIN_DRIVE_RPM: f64 = 20.0;
const MIN_TURN_RPM: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowCommand {
    pub left_rpm: f64,
    pub right_rpm: f64,
    pub arrived: bool,
}

impl FollowCommand {
    fn hold(arrived: bool) -> Self {
        Self {
            left_rpm: 0.0,
            right_rpm: 0.0,
            arrived,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    Drive { turning: bool },
    Align,
    Dwell { remaining: f64 },
    Done,
}

/// Turn-then-drive pursuit of a waypoint list.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFollower {
    waypoints: Vec<Waypoint>,
    index: usize,
    stage: Stage,
    cfg: FollowerConfig,
    best_metric: f64,
    stalled_for: f64,
}

impl TrajectoryFollower {
    pub fn new(waypoints: Vec<Waypoint>, cfg: FollowerConfig) -> Self {
        let stage = if waypoints.is_empty() {
            Stage::Done
        } else {
            Stage::Drive { turning: false }
        };
        Self {
            waypoints,
            index: 0,
            stage,
            cfg,
            best_metric: f64::INFINITY,
            stalled_for: 0.0,
        }
    }

    pub fn for_trajectory(traj: &Trajectory, cfg: FollowerConfig) -> Self {
        Self::new(traj.waypoints.clone(), cfg)
    }

    pub fn is_done(&self) -> bool {
        self.stage == Stage::Done
    }

    /// Index of the waypoint currently pursued.
    pub fn current_index(&self) -> usize {
        self.index
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    /// Wheel setpoints for this step. Errors once no progress has been made
    /// for `stall_timeout` seconds.
    pub fn step(&mut self, pose: &Pose, dt: f64) -> Result<FollowCommand> {
        loop {
            let Some(target) = self.waypoints.get(self.index).copied() else {
                self.stage = Stage::Done;
                return Ok(FollowCommand::hold(true));
            };
            let is_last = self.index + 1 == self.waypoints.len();
            let dx = target.pose.x - pose.x;
            let dy = target.pose.y - pose.y;
            let dist = dx.hypot(dy);
            match self.stage {
                Stage::Done => return Ok(FollowCommand::hold(true)),
                Stage::Drive { turning } => {
                    if dist <= self.cfg.position_tolerance {
                        self.stage = if is_last { Stage::Align } else { self.dwell_stage(&target) };
                        self.reset_progress();
                        continue;
                    }
                    let herr = wrap_angle(dy.atan2(dx) - pose.heading);
                    self.watch(dist + 0.1 * herr.abs(), dt)?;
                    let turning = if turning { herr.abs() > TURN_EXIT } else { herr.abs() > TURN_ENTER };
                    self.stage = Stage::Drive { turning };
                    return Ok(if turning {
                        self.spin(herr)
                    } else {
                        let speed = (self.cfg.cruise_rpm * (dist / SLOWDOWN_M).min(1.0)).max(MIN_DRIVE_RPM);
                        let steer = (herr * 2.0 * speed).clamp(-0.3 * speed, 0.3 * speed);
                        FollowCommand {
                            left_rpm: speed - steer,
                            right_rpm: speed + steer,
                            arrived: false,
                        }
                    });
                }
                Stage::Align => {
                    let herr = wrap_angle(target.pose.heading - pose.heading);
                    if herr.abs() <= TURN_EXIT.max(self.cfg.heading_tolerance * 0.5) {
                        self.stage = self.dwell_stage(&target);
                        self.reset_progress();
                        continue;
                    }
                    self.watch(herr.abs(), dt)?;
                    return Ok(self.spin(herr));
                }
                Stage::Dwell { remaining } => {
                    if remaining <= 1e-9 {
                        if is_last {
                            self.stage = Stage::Done;
                            return Ok(FollowCommand::hold(true));
                        }
                        self.index += 1;
                        self.stage = Stage::Drive { turning: false };
                        self.reset_progress();
                        continue;
                    }
                    self.stage = Stage::Dwell {
                        remaining: remaining - dt,
                    };
                    return Ok(FollowCommand::hold(false));
                }
            }
        }
    }

    fn dwell_stage(&self, target: &Waypoint) -> Stage {
        Stage::Dwell {
            remaining: target.dwell,
        }
    }

    fn spin(&self, herr: f64) -> FollowCommand {
        let mag = (self.cfg.turn_rpm * herr.abs().min(1.0)).max(MIN_TURN_RPM);
        let rpm = mag * herr.signum();
        FollowCommand {
            left_rpm: -rpm,
            right_rpm: rpm,
            arrived: false,
        }
    }

    fn reset_progress(&mut self) {
        self.best_metric = f64::INFINITY;
        self.stalled_for = 0.0;
    }

    fn watch(&mut self, metric: f64, dt: f64) -> Result<()> {
        if metric < self.best_metric - 0.01 {
            self.best_metric = metric;
            self.stalled_for = 0.0;
        } else {
            self.stalled_for += dt;
            if self.stalled_for >= self.cfg.stall_timeout {
                return Err(MotionError::NavigationTimeout {
                    waypoint: self.index,
                    stalled_s: self.stalled_for,
                });
            }
        }
        Ok(())
    }
}

/// Whether the robot can move from one pose to the next; used for obstacles.
pub trait Clearance {
    fn is_clear(&self, from: &Pose, to: &Pose) -> bool;
}

/// Open floor with no obstacles.
pub struct OpenFloor;

impl Clearance for OpenFloor {
    fn is_clear(&self, _: &Pose, _: &Pose) -> bool {
        true
    }
}

/// Advances one control period: setpoints from the follower, wheel loops,
/// pose integration. A blocked move leaves the pose unchanged and stalls the
/// wheels.
pub fn drive_step(
    follower: &mut TrajectoryFollower,
    base: &mut DriveBase,
    pose: &mut Pose,
    dt: f64,
    clearance: &dyn Clearance,
) -> Result<bool> {
    let cmd = follower.step(pose, dt)?;
    let (v, omega) = base.step(cmd.left_rpm, cmd.right_rpm, dt)?;
    let next = pose.integrate(v, omega, dt);
    if clearance.is_clear(pose, &next) {
        *pose = next;
    } else {
        base.stall();
    }
    Ok(cmd.arrived && !base.is_moving_fast())
}

impl DriveBase {
    fn is_moving_fast(&self) -> bool {
        self.left.rpm.abs() > 1.0 || self.right.rpm.abs() > 1.0
    }
}

/// Drives along `waypoints` until arrival; returns the final pose and elapsed
/// time. Used for offline estimates and tests.
pub fn simulate_route(
    waypoints: Vec<Waypoint>,
    start: Pose,
    plant: DrivePlant,
    gains: PidGains,
    cfg: FollowerConfig,
    dt: f64,
    clearance: &dyn Clearance,
) -> Result<(Pose, f64)> {
    let mut follower = TrajectoryFollower::new(waypoints, cfg);
    let mut base = DriveBase::new(plant, gains)?;
    let mut pose = start;
    let mut t = 0.0;
    loop {
        if drive_step(&mut follower, &mut base, &mut pose, dt, clearance)? {
            return Ok((pose, t));
        }
        t += dt;
    }
}
