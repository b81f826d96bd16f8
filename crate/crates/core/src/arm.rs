//! Three-link medicine arm: DH kinematics, position Jacobian, inverse
//! kinematics and pick-and-place planning.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ArmError {
    #[error("joint {joint} angle {angle:.4} rad outside [{min:.4}, {max:.4}]")]
    JointLimit { joint: usize, angle: f64, min: f64, max: f64 },
    #[error("target on the base axis has no defined first-joint angle")]
    SingularTarget,
    #[error("damped pseudo-inverse is singular (lambda = {0})")]
    SingularMatrix(f64),
    #[error("target at radius {radius:.4} m, z {z:.4} m is outside the workspace [{inner:.4}, {outer:.4}]")]
    Unreachable { radius: f64, z: f64, inner: f64, outer: f64 },
    #[error("IK did not converge: residual {residual:.3e} m after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, ArmError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DhRow {
    /// Joint angle offset, radians. The joint variable is added to it.
    pub theta: f64,
    pub d: f64,
    pub a: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhTable {
    pub rows: [DhRow; 3],
}

impl Default for DhTable {
    fn default() -> Self {
        let link = |a| DhRow { theta: 0.0, d: 0.0, a, alpha: 0.0 };
        Self {
            rows: [link(0.10), link(0.22), link(0.15)],
        }
    }
}

impl DhTable {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if ![r.theta, r.d, r.a, r.alpha].iter().all(|v| v.is_finite()) {
                return Err(ArmError::InvalidParameter(format!("row {} not finite", i + 1)));
            }
            if r.a <= 0.0 {
                return Err(ArmError::InvalidParameter(format!("link {} length must be positive", i + 1)));
            }
        }
        Ok(())
    }

    pub fn link_lengths(&self) -> [f64; 3] {
        [self.rows[0].a, self.rows[1].a, self.rows[2].a]
    }

    /// True when every joint axis is parallel to base z (alpha = 0, d = 0).
    pub fn is_planar(&self) -> bool {
        self.rows.iter().all(|r| r.alpha == 0.0 && r.d == 0.0)
    }

    /// Radial reach annulus `[inner, outer]` of the planar chain.
    pub fn reach(&self) -> (f64, f64) {
        let a = self.link_lengths();
        let outer: f64 = a.iter().sum();
        let longest = a.iter().copied().fold(0.0, f64::max);
        (0.0_f64.max(2.0 * longest - outer), outer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: [f64; 3],
    pub limits: [(f64, f64); 3],
}

pub const DEFAULT_LIMITS: [(f64, f64); 3] = [(-std::f64::consts::PI, std::f64::consts::PI); 3];

impl JointState {
    pub fn new(q: [f64; 3]) -> Self {
        Self {
            q,
            limits: DEFAULT_LIMITS,
        }
    }

    pub fn check_limits(&self) -> Result<()> {
        for (j, (&angle, &(min, max))) in self.q.iter().zip(&self.limits).enumerate() {
            if !angle.is_finite() || angle < min || angle > max {
                return Err(ArmError::JointLimit { joint: j + 1, angle, min, max });
            }
        }
        Ok(())
    }

    fn clamped(&self, q: [f64; 3]) -> JointState {
        let mut out = *self;
        for j in 0..3 {
            out.q[j] = q[j].clamp(self.limits[j].0, self.limits[j].1);
        }
        out
    }
}

/// End-effector position in the arm base frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EndEffectorState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EndEffectorState {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn distance_to(&self, other: &EndEffectorState) -> f64 {
        (self.as_vector() - other.as_vector()).norm()
    }
}

/// Homogeneous link transform for one DH row.
pub fn dh_transform(row: &DhRow) -> Matrix4<f64> {
    let (st, ct) = row.theta.sin_cos();
    let (sa, ca) = row.alpha.sin_cos();
    Matrix4::new(
        ct, -st * ca, st * sa, row.a * ct,
        st, ct * ca, -ct * sa, row.a * st,
        0.0, sa, ca, row.d,
        0.0, 0.0, 0.0, 1.0,
    )
}

fn joint_rows(q: &[f64; 3], table: &DhTable) -> [DhRow; 3] {
    let mut rows = table.rows;
    for (row, angle) in rows.iter_mut().zip(q) {
        row.theta += angle;
    }
    rows
}

/// Frames `T_0, T_1, T_2, T_3` along the chain (`T_0` is the identity).
fn chain_frames(q: &[f64; 3], table: &DhTable) -> [Matrix4<f64>; 4] {
    let rows = joint_rows(q, table);
    let mut frames = [Matrix4::identity(); 4];
    for i in 0..3 {
        frames[i + 1] = frames[i] * dh_transform(&rows[i]);
    }
    frames
}

/// End-effector position and the full chain transform `A1 A2 A3`.
pub fn forward_kinematics(q: &JointState, table: &DhTable) -> Result<(EndEffectorState, Matrix4<f64>)> {
    q.check_limits()?;
    let t = chain_frames(&q.q, table)[3];
    Ok((EndEffectorState::new(t[(0, 3)], t[(1, 3)], t[(2, 3)]), t))
}

fn position_unchecked(q: &[f64; 3], table: &DhTable) -> Vector3<f64> {
    let t = chain_frames(q, table)[3];
    Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)])
}

/// Position Jacobian: column `j` is `z_{j-1} x (p_e - p_{j-1})` for revolute joint `j`.
pub fn jacobian(q: &JointState, table: &DhTable) -> Result<Matrix3<f64>> {
    q.check_limits()?;
    Ok(jacobian_unchecked(&q.q, table))
}

fn jacobian_unchecked(q: &[f64; 3], table: &DhTable) -> Matrix3<f64> {
    let frames = chain_frames(q, table);
    let p_e = frames[3].fixed_view::<3, 1>(0, 3).into_owned();
    let mut j = Matrix3::zeros();
    for i in 0..3 {
        let z = frames[i].fixed_view::<3, 1>(0, 2).into_owned();
        let p = frames[i].fixed_view::<3, 1>(0, 3).into_owned();
        j.set_column(i, &z.cross(&(p_e - p)));
    }
    j
}

/// Closed-form solution: base yaw, an axial offset `d3` and a
/// second-joint angle. It treats the third joint as prismatic, so the result
/// does not reproduce the target through [`forward_kinematics`] on the
/// all-revolute table; the controller uses [`ik_dls`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrismaticIk {
    pub theta1: f64,
    pub d3: f64,
    pub theta2: f64,
}

pub fn ik_closed_form(target: &EndEffectorState, table: &DhTable) -> Result<PrismaticIk> {
    if target.x == 0.0 && target.y == 0.0 {
        return Err(ArmError::SingularTarget);
    }
    let d1 = table.rows[0].d;
    let a1 = table.rows[0].a;
    let a2 = table.rows[1].a;
    let theta1 = target.y.atan2(target.x);
    let d3 = target.z - d1;
    let radial = target.x.hypot(target.y);
    let theta2 = (radial - a1).atan2(d3) - a2.atan2(d3);
    Ok(PrismaticIk { theta1, d3, theta2 })
}

/// `(J^T J + lambda^2 I)^-1 J^T`.
pub fn damped_pinv(j: &Matrix3<f64>, lambda: f64) -> Result<Matrix3<f64>> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ArmError::InvalidParameter(format!("lambda {lambda} must be non-negative")));
    }
    let jtj = j.transpose() * j;
    let damped = jtj + Matrix3::identity() * (lambda * lambda);
    let scale = damped.norm().max(f64::MIN_POSITIVE);
    let svals = damped.singular_values();
    let smallest = svals.iter().copied().fold(f64::INFINITY, f64::min);
    if smallest <= 1e-14 * scale {
        return Err(ArmError::SingularMatrix(lambda));
    }
    let inv = damped.try_inverse().ok_or(ArmError::SingularMatrix(lambda))?;
    Ok(inv * j.transpose())
}

pub fn joint_velocities(j_pinv: &Matrix3<f64>, ee_vel: &Vector3<f64>) -> Vector3<f64> {
    j_pinv * ee_vel
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkParams {
    pub lambda: f64,
    /// Position tolerance, meters.
    pub tol: f64,
    pub max_iters: usize,
    /// Largest joint change per iteration, radians.
    pub max_step: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            tol: 1e-4,
            max_iters: 200,
            max_step: 0.5,
        }
    }
}

/// Checks the target against the planar reach annulus.
pub fn check_reachable(target: &EndEffectorState, table: &DhTable, tol: f64) -> Result<()> {
    let (inner, outer) = table.reach();
    let radius = target.x.hypot(target.y);
    let planar_ok = !table.is_planar() || target.z.abs() <= tol;
    if !planar_ok || radius < inner - tol || radius > outer + tol || !radius.is_finite() {
        return Err(ArmError::Unreachable {
            radius,
            z: target.z,
            inner,
            outer,
        });
    }
    Ok(())
}

/// Iterative damped-least-squares IK starting from `q0`.
///
/// If the first descent stalls (joint limits can trap it on the wrong
/// elbow), it restarts from a fixed set of seeds, so the result is a
/// deterministic function of the inputs.
pub fn ik_dls(target: &EndEffectorState, q0: &JointState, table: &DhTable, params: &IkParams) -> Result<JointState> {
    table.validate()?;
    q0.check_limits()?;
    check_reachable(target, table, params.tol)?;

    let mut last_err = None;
    let base_yaw = target.y.atan2(target.x);
    let seeds = std::iter::once(q0.q).chain(
        [[0.0, 1.2, -2.0], [0.0, -1.2, 2.0], [0.0, 0.6, 0.6], [0.0, -0.6, -0.6]]
            .into_iter()
            .map(|s| [base_yaw + s[0] - 0.5, s[1], s[2]]),
    );
    for seed in seeds {
        match descend(target, &q0.clamped(seed), table, params) {
            Ok(q) => return Ok(q),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one seed is tried"))
}

fn descend(target: &EndEffectorState, q0: &JointState, table: &DhTable, params: &IkParams) -> Result<JointState> {
    let goal = target.as_vector();
    let mut q = *q0;
    let mut residual = f64::INFINITY;
    for iter in 0..=params.max_iters {
        let err = goal - position_unchecked(&q.q, table);
        residual = err.norm();
        if residual <= params.tol {
            return Ok(q);
        }
        if iter == params.max_iters {
            break;
        }
        let j = jacobian_unchecked(&q.q, table);
        let pinv = damped_pinv(&j, params.lambda)?;
        let mut dq = joint_velocities(&pinv, &err);
        let norm = dq.amax();
        if norm > params.max_step {
            dq *= params.max_step / norm;
        }
        q = q.clamped([q.q[0] + dq[0], q.q[1] + dq[1], q.q[2] + dq[2]]);
    }
    Err(ArmError::NoConvergence {
        residual,
        iterations: params.max_iters,
    })
}

/// Arm motor speed limit, rad/s.
pub const ARM_JOINT_SPEED: f64 = 5.24;
/// Gripper close/open time, seconds.
pub const GRIPPER_DWELL: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmAction {
    MoveToOutlet,
    Grip,
    MoveToDesk,
    Release,
    ReturnHome,
}

/// One timed piece of an arm trajectory; joint motion is linear in joint space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSegment {
    pub action: ArmAction,
    pub start: f64,
    pub duration: f64,
    pub from: [f64; 3],
    pub to: [f64; 3],
}

impl ArmSegment {
    pub fn joint_rate(&self) -> f64 {
        if self.duration <= 0.0 {
            return 0.0;
        }
        self.from
            .iter()
            .zip(&self.to)
            .map(|(a, b)| (b - a).abs() / self.duration)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmTrajectory {
    pub segments: Vec<ArmSegment>,
    /// `(label, joint solution, commanded target)` for the outlet and desk.
    pub via_points: Vec<(ArmAction, [f64; 3], EndEffectorState)>,
}

impl ArmTrajectory {
    pub fn duration(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.start + s.duration)
    }

    /// Sum of joint-space distance travelled, radians.
    pub fn path_length(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.from.iter().zip(&s.to).map(|(a, b)| (b - a).abs()).sum::<f64>())
            .sum()
    }

    pub fn max_joint_rate(&self) -> f64 {
        self.segments.iter().map(ArmSegment::joint_rate).fold(0.0, f64::max)
    }

    /// Joint angles at time `t` (clamped to the trajectory span).
    pub fn sample(&self, t: f64) -> Option<[f64; 3]> {
        if t >= self.duration() {
            return self.segments.last().map(|s| s.to);
        }
        let seg = self
            .segments
            .iter()
            .find(|s| t <= s.start + s.duration)
            .or(self.segments.last())?;
        let u = if seg.duration > 0.0 {
            ((t - seg.start) / seg.duration).clamp(0.0, 1.0)
        } else {
            1.0
        };
        if u >= 1.0 {
            return Some(seg.to);
        }
        let mut q = [0.0; 3];
        for i in 0..3 {
            q[i] = seg.from[i] + (seg.to[i] - seg.from[i]) * u;
        }
        Some(q)
    }
}

/// Home, outlet (grip), desk (release), home, each leg timed so no joint
/// exceeds [`ARM_JOINT_SPEED`].
pub fn pick_and_place(
    outlet: &EndEffectorState,
    desk: &EndEffectorState,
    home: &JointState,
    table: &DhTable,
    params: &IkParams,
) -> Result<ArmTrajectory> {
    home.check_limits()?;
    let q_outlet = ik_dls(outlet, home, table, params)?;
    let q_desk = ik_dls(desk, &q_outlet, table, params)?;

    let mut segments = Vec::new();
    let mut t = 0.0;
    let mut push = |action, from: [f64; 3], to: [f64; 3], duration: f64| {
        segments.push(ArmSegment {
            action,
            start: t,
            duration,
            from,
            to,
        });
        t += duration;
    };
    let travel = |a: &[f64; 3], b: &[f64; 3]| {
        a.iter().zip(b).map(|(x, y)| (y - x).abs()).fold(0.0, f64::max) / ARM_JOINT_SPEED
    };
    push(ArmAction::MoveToOutlet, home.q, q_outlet.q, travel(&home.q, &q_outlet.q));
    push(ArmAction::Grip, q_outlet.q, q_outlet.q, GRIPPER_DWELL);
    push(ArmAction::MoveToDesk, q_outlet.q, q_desk.q, travel(&q_outlet.q, &q_desk.q));
    push(ArmAction::Release, q_desk.q, q_desk.q, GRIPPER_DWELL);
    push(ArmAction::ReturnHome, q_desk.q, home.q, travel(&q_desk.q, &home.q));

    Ok(ArmTrajectory {
        segments,
        via_points: vec![
            (ArmAction::Grip, q_outlet.q, *outlet),
            (ArmAction::Release, q_desk.q, *desk),
        ],
    })
}
