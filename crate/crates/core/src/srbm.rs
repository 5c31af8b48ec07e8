//! Single-rigid-body dynamics with ground-reaction forces at point footholds.
//!
//! The body is a lumped rigid mass manipulated purely through forces applied at
//! stance feet. Both the trajectory optimizer and the simulation environment
//! evaluate the same derivative; only the discretization differs.

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRAVITY: f64 = 9.81;

/// Gravity acceleration vector, world frame.
pub fn gravity_accel() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

#[derive(Debug, Error)]
pub enum SrbmError {
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("integration step must be non-negative, got {0}")]
    NegativeDt(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Foot {
    Left,
    Right,
}

impl Foot {
    pub const BOTH: [Foot; 2] = [Foot::Left, Foot::Right];

    pub fn index(self) -> usize {
        match self {
            Foot::Left => 0,
            Foot::Right => 1,
        }
    }

    pub fn other(self) -> Foot {
        match self {
            Foot::Left => Foot::Right,
            Foot::Right => Foot::Left,
        }
    }

    /// Sign of the lateral (body-frame y) side this foot lives on.
    pub fn lateral_sign(self) -> f64 {
        match self {
            Foot::Left => 1.0,
            Foot::Right => -1.0,
        }
    }
}

/// Rigid-body state: CoM position, orientation, linear and angular velocity.
///
/// The angular velocity is expressed in world coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SrbmState {
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl SrbmState {
    pub fn at_rest(height: f64) -> Self {
        Self {
            p: Vector3::new(0.0, 0.0, height),
            q: UnitQuaternion::identity(),
            v: Vector3::zeros(),
            w: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|x| x.is_finite())
            && self.q.coords.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.w.iter().all(|x| x.is_finite())
    }

    /// ZYX-Euler yaw of the body orientation, in (-pi, pi].
    pub fn yaw(&self) -> f64 {
        yaw_of_quat_coords(&self.q.coords)
    }

    /// World-frame angular momentum about the CoM.
    pub fn angular_momentum(&self, params: &RigidBodyParams) -> Vector3<f64> {
        params.world_inertia(&self.q) * self.w
    }

    /// Angular momentum expressed in body coordinates (the reward-tracked quantity).
    pub fn body_angular_momentum(&self, params: &RigidBodyParams) -> Vector3<f64> {
        self.q.inverse_transform_vector(&self.angular_momentum(params))
    }
}

/// Mass, inertia and leg geometry of the lumped body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigidBodyParams {
    pub mass: f64,
    /// Body-frame inertia tensor, symmetric positive definite.
    pub inertia: Matrix3<f64>,
    pub leg_length_min: f64,
    pub leg_length_max: f64,
    /// Per-leg hip attachment offsets from the CoM, body frame (left, right).
    pub hip_offsets: [Vector3<f64>; 2],
}

impl Default for RigidBodyParams {
    fn default() -> Self {
        Self {
            mass: 31.0,
            inertia: Matrix3::from_diagonal(&Vector3::new(0.25, 0.6, 0.6)),
            leg_length_min: 0.3,
            leg_length_max: 1.0,
            hip_offsets: [Vector3::new(0.0, 0.1, 0.0), Vector3::new(0.0, -0.1, 0.0)],
        }
    }
}

impl RigidBodyParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.mass > 0.0) {
            return Err(format!("mass must be positive, got {}", self.mass));
        }
        if (self.inertia - self.inertia.transpose()).amax() > 1e-12 {
            return Err("inertia tensor must be symmetric".into());
        }
        if self.inertia.symmetric_eigenvalues().min() <= 0.0 {
            return Err("inertia tensor must be positive definite".into());
        }
        if !(0.0 < self.leg_length_min && self.leg_length_min < self.leg_length_max) {
            return Err(format!(
                "leg length limits must satisfy 0 < min < max, got [{}, {}]",
                self.leg_length_min, self.leg_length_max
            ));
        }
        Ok(())
    }

    pub fn hip_offset(&self, foot: Foot) -> Vector3<f64> {
        self.hip_offsets[foot.index()]
    }

    /// World-frame hip attachment point for `foot`.
    pub fn hip_world(&self, state: &SrbmState, foot: Foot) -> Vector3<f64> {
        state.p + state.q * self.hip_offset(foot)
    }

    /// Inertia tensor rotated into world coordinates.
    pub fn world_inertia(&self, q: &UnitQuaternion<f64>) -> Matrix3<f64> {
        let r = q.to_rotation_matrix();
        r * self.inertia * r.transpose()
    }
}

/// Per-foot contact state and applied ground-reaction force.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Foothold {
    pub position: Vector3<f64>,
    pub in_stance: bool,
    pub grf: Vector3<f64>,
}

impl Foothold {
    pub fn swinging(position: Vector3<f64>) -> Self {
        Self { position, in_stance: false, grf: Vector3::zeros() }
    }

    pub fn stance(position: Vector3<f64>, grf: Vector3<f64>) -> Self {
        Self { position, in_stance: true, grf }
    }

    /// Force this foot transmits to the body: zero unless in stance.
    pub fn applied_force(&self) -> Vector3<f64> {
        if self.in_stance {
            self.grf
        } else {
            Vector3::zeros()
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FootholdSet {
    pub feet: [Foothold; 2],
}

impl FootholdSet {
    pub fn airborne() -> Self {
        Self {
            feet: [
                Foothold::swinging(Vector3::zeros()),
                Foothold::swinging(Vector3::zeros()),
            ],
        }
    }

    pub fn foot(&self, foot: Foot) -> &Foothold {
        &self.feet[foot.index()]
    }

    pub fn foot_mut(&mut self, foot: Foot) -> &mut Foothold {
        &mut self.feet[foot.index()]
    }

    pub fn stance_count(&self) -> usize {
        self.feet.iter().filter(|f| f.in_stance).count()
    }

    pub fn is_finite(&self) -> bool {
        self.feet.iter().all(|f| {
            f.position.iter().all(|x| x.is_finite()) && f.grf.iter().all(|x| x.is_finite())
        })
    }
}

/// Time-derivative of an [`SrbmState`]. `q_dot` lives in the ambient 4-space.
#[derive(Debug, Clone, Copy)]
pub struct SrbmDerivative {
    pub p_dot: Vector3<f64>,
    pub q_dot: Vector4<f64>,
    pub v_dot: Vector3<f64>,
    pub w_dot: Vector3<f64>,
}

/// Continuous-time SRBM dynamics.
///
/// Translational: m v_dot = sum of stance forces + gravity. Rotational, world
/// frame: d/dt(I_w w) = sum (foot - p) x grf, with the gyroscopic transport
/// term w x (I_w w) moved to the right-hand side when solving for w_dot.
pub fn dynamics_derivative(
    state: &SrbmState,
    feet: &FootholdSet,
    params: &RigidBodyParams,
) -> Result<SrbmDerivative, SrbmError> {
    if !state.is_finite() {
        return Err(SrbmError::NonFinite("state"));
    }
    if !feet.is_finite() {
        return Err(SrbmError::NonFinite("footholds"));
    }

    let mut force = Vector3::zeros();
    let mut torque = Vector3::zeros();
    for f in &feet.feet {
        let grf = f.applied_force();
        force += grf;
        torque += (f.position - state.p).cross(&grf);
    }

    let v_dot = force / params.mass + gravity_accel();
    let q_dot = quat_kinematics(&state.q.coords, &state.w);

    let inertia_w = params.world_inertia(&state.q);
    let rhs = torque - state.w.cross(&(inertia_w * state.w));
    let w_dot = inertia_w
        .lu()
        .solve(&rhs)
        .ok_or(SrbmError::NonFinite("inertia solve"))?;

    Ok(SrbmDerivative { p_dot: state.v, q_dot, v_dot, w_dot })
}

/// Advance the state by `dt` under piecewise-constant foot forces.
///
/// Translation uses the exact constant-acceleration update. Rotation advances
/// the angular momentum (so zero-torque motion conserves it to roundoff) and
/// rotates the orientation by the exponential map of `w * dt`.
pub fn integrate_step(
    state: &SrbmState,
    feet: &FootholdSet,
    params: &RigidBodyParams,
    dt: f64,
) -> Result<SrbmState, SrbmError> {
    if !dt.is_finite() || dt < 0.0 {
        return Err(SrbmError::NegativeDt(dt));
    }
    if dt == 0.0 {
        return Ok(*state);
    }

    let deriv = dynamics_derivative(state, feet, params)?;

    let p = state.p + state.v * dt + deriv.v_dot * (0.5 * dt * dt);
    let v = state.v + deriv.v_dot * dt;

    let momentum = params.world_inertia(&state.q) * state.w;
    let mut torque = Vector3::zeros();
    for f in &feet.feet {
        torque += (f.position - state.p).cross(&f.applied_force());
    }
    let momentum_next = momentum + torque * dt;

    let q = UnitQuaternion::from_scaled_axis(state.w * dt) * state.q;
    let w = params
        .world_inertia(&q)
        .lu()
        .solve(&momentum_next)
        .ok_or(SrbmError::NonFinite("inertia solve"))?;

    let next = SrbmState { p, q, v, w };
    if !next.is_finite() {
        return Err(SrbmError::NonFinite("integrated state"));
    }
    Ok(next)
}

/// Quaternion kinematics q_dot = 1/2 (0, w) * q for a world-frame angular
/// velocity. Linear in both arguments; valid for non-unit q.
pub fn quat_kinematics(q: &Vector4<f64>, w: &Vector3<f64>) -> Vector4<f64> {
    // nalgebra quaternion coords order: (x, y, z, w_scalar)
    let (qx, qy, qz, qw) = (q[0], q[1], q[2], q[3]);
    0.5 * Vector4::new(
        qw * w.x + w.y * qz - w.z * qy,
        qw * w.y + w.z * qx - w.x * qz,
        qw * w.z + w.x * qy - w.y * qx,
        -(w.x * qx + w.y * qy + w.z * qz),
    )
}

/// ZYX-Euler yaw extracted from quaternion coords (x, y, z, w), scale-invariant.
pub fn yaw_of_quat_coords(q: &Vector4<f64>) -> f64 {
    let (x, y, z, w) = (q[0], q[1], q[2], q[3]);
    let siny = 2.0 * (w * z + x * y);
    let cosy = w * w + x * x - y * y - z * z;
    let yaw = siny.atan2(cosy);
    if yaw <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        yaw
    }
}

/// Wrap an angle difference into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = a % two_pi;
    if x > std::f64::consts::PI {
        x -= two_pi;
    } else if x <= -std::f64::consts::PI {
        x += two_pi;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn params() -> RigidBodyParams {
        RigidBodyParams::default()
    }

    #[test]
    fn free_fall_acceleration() {
        let state = SrbmState::at_rest(0.8);
        let d = dynamics_derivative(&state, &FootholdSet::airborne(), &params()).unwrap();
        assert_abs_diff_eq!(d.v_dot, Vector3::new(0.0, 0.0, -GRAVITY));
        assert_abs_diff_eq!(d.w_dot, Vector3::zeros());
    }

    #[test]
    fn static_balance_under_com() {
        let p = params();
        let state = SrbmState::at_rest(0.8);
        let mut feet = FootholdSet::airborne();
        *feet.foot_mut(Foot::Left) = Foothold::stance(
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, p.mass * GRAVITY),
        );
        let d = dynamics_derivative(&state, &feet, &p).unwrap();
        assert_abs_diff_eq!(d.v_dot, Vector3::zeros(), epsilon = 1e-12);
        assert_abs_diff_eq!(d.w_dot, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn offset_foothold_pitches_body() {
        // Foot 0.1 m ahead of the CoM pushing straight up: torque about -y,
        // w_dot_y = -(0.1 * m * g) / I_yy by hand-evaluating r x f.
        let p = params();
        let state = SrbmState::at_rest(0.8);
        let mut feet = FootholdSet::airborne();
        *feet.foot_mut(Foot::Left) = Foothold::stance(
            Vector3::new(0.1, 0.0, 0.8) - Vector3::new(0.0, 0.0, 0.8),
            Vector3::new(0.0, 0.0, p.mass * GRAVITY),
        );
        let d = dynamics_derivative(&state, &feet, &p).unwrap();
        let expected = -(0.1 * p.mass * GRAVITY) / p.inertia[(1, 1)];
        assert_relative_eq!(d.w_dot.y, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(d.w_dot.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.w_dot.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn swing_foot_exerts_no_force() {
        let mut feet = FootholdSet::airborne();
        feet.foot_mut(Foot::Right).grf = Vector3::new(10.0, 0.0, 50.0);
        assert_abs_diff_eq!(feet.foot(Foot::Right).applied_force(), Vector3::zeros());
    }

    #[test]
    fn non_finite_state_rejected() {
        let mut state = SrbmState::at_rest(0.8);
        state.v.x = f64::NAN;
        assert!(dynamics_derivative(&state, &FootholdSet::airborne(), &params()).is_err());
    }

    #[test]
    fn zero_dt_is_identity() {
        let state = SrbmState {
            p: Vector3::new(0.3, -0.2, 0.9),
            q: UnitQuaternion::from_euler_angles(0.1, -0.2, 0.4),
            v: Vector3::new(1.0, 0.2, -0.1),
            w: Vector3::new(0.5, -0.4, 1.0),
        };
        let next = integrate_step(&state, &FootholdSet::airborne(), &params(), 0.0).unwrap();
        assert_eq!(state.p, next.p);
        assert_eq!(state.q, next.q);
        assert_eq!(state.v, next.v);
        assert_eq!(state.w, next.w);
    }

    #[test]
    fn negative_dt_rejected() {
        let state = SrbmState::at_rest(0.8);
        assert!(integrate_step(&state, &FootholdSet::airborne(), &params(), -1e-3).is_err());
    }

    #[test]
    fn free_fall_velocity_after_tenth_second() {
        let mut state = SrbmState::at_rest(1.0);
        let feet = FootholdSet::airborne();
        let p = params();
        let dt = 5e-4;
        for _ in 0..200 {
            state = integrate_step(&state, &feet, &p, dt).unwrap();
        }
        assert_abs_diff_eq!(state.v.z, -0.981, epsilon = 1e-12);
    }

    #[test]
    fn ballistic_closed_form_over_one_second() {
        let start = SrbmState {
            p: Vector3::new(0.0, 0.0, 2.0),
            q: UnitQuaternion::identity(),
            v: Vector3::new(1.5, -0.5, 2.0),
            w: Vector3::zeros(),
        };
        let mut state = start;
        let feet = FootholdSet::airborne();
        let p = params();
        let dt = 5e-4;
        let steps = 2000;
        for _ in 0..steps {
            state = integrate_step(&state, &feet, &p, dt).unwrap();
        }
        let t = dt * steps as f64;
        let expected = start.p + start.v * t + gravity_accel() * (0.5 * t * t);
        assert!(
            (state.p - expected).norm() <= 1e-9 * expected.norm().max(1.0),
            "ballistic drift {:e}",
            (state.p - expected).norm()
        );
    }

    #[test]
    fn hover_holds_position() {
        let p = params();
        let mut feet = FootholdSet::airborne();
        *feet.foot_mut(Foot::Left) = Foothold::stance(
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, p.mass * GRAVITY),
        );
        let start = SrbmState::at_rest(0.8);
        let mut state = start;
        for _ in 0..100 {
            state = integrate_step(&state, &feet, &p, 5e-4).unwrap();
        }
        assert!((state.p - start.p).norm() < 1e-9);
    }

    #[test]
    fn torque_free_tumble_conserves_angular_momentum() {
        let p = params();
        let start = SrbmState {
            p: Vector3::new(0.0, 0.0, 5.0),
            q: UnitQuaternion::from_euler_angles(0.3, 0.2, -0.1),
            v: Vector3::zeros(),
            w: Vector3::new(1.2, -0.7, 2.0),
        };
        let l0 = start.angular_momentum(&p);
        let feet = FootholdSet::airborne();
        let mut state = start;
        for _ in 0..2000 {
            state = integrate_step(&state, &feet, &p, 5e-4).unwrap();
            assert!((state.q.coords.norm() - 1.0).abs() < 1e-9);
        }
        let l1 = state.angular_momentum(&p);
        assert!((l1 - l0).norm() < 1e-7, "momentum drift {:e}", (l1 - l0).norm());
    }

    #[test]
    fn yaw_of_identity_and_quarter_turn() {
        let state = SrbmState::at_rest(0.8);
        assert_eq!(state.yaw(), 0.0);

        let quarter = SrbmState {
            q: UnitQuaternion::from_euler_angles(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            ..state
        };
        assert_relative_eq!(quarter.yaw(), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn yaw_survives_pitch_composition() {
        let yaw = -std::f64::consts::FRAC_PI_2;
        let q = UnitQuaternion::from_euler_angles(0.0, 0.0, yaw)
            * UnitQuaternion::from_euler_angles(0.0, 10f64.to_radians(), 0.0);
        let state = SrbmState { q, ..SrbmState::at_rest(0.8) };
        assert_relative_eq!(state.yaw(), yaw, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn yaw_roundtrip(a in -std::f64::consts::PI..=std::f64::consts::PI) {
            prop_assume!(a > -std::f64::consts::PI);
            let q = UnitQuaternion::from_euler_angles(0.0, 0.0, a);
            let state = SrbmState { q, ..SrbmState::at_rest(0.8) };
            prop_assert!((state.yaw() - a).abs() < 1e-12);
        }

        #[test]
        fn wrap_angle_stays_in_branch(a in -50.0f64..50.0) {
            let x = wrap_angle(a);
            prop_assert!(x > -std::f64::consts::PI && x <= std::f64::consts::PI);
            // Same angle modulo 2 pi.
            prop_assert!(((a - x) / (2.0 * std::f64::consts::PI)).rem_euclid(1.0) < 1e-9
                || ((a - x) / (2.0 * std::f64::consts::PI)).rem_euclid(1.0) > 1.0 - 1e-9);
        }
    }
}
