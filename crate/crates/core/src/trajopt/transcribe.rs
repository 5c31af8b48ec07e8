//! Transcription of the four-step turn into a sparse NLP.
//!
//! Trapezoidal collocation on the SRBM dynamics with a prescribed alternating
//! single-stance contact sequence. Decision variables per phase: knot states
//! (13 each: p, q, v, w), knot ground-reaction forces (3 each), one foothold
//! (3) and one duration. Phase durations are free within bounds, so knot
//! spacing h = duration / (knots - 1) enters the defect derivatives.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::srbm::{Foot, RigidBodyParams, GRAVITY};

use super::nlp::ConstrainedProblem;

pub const STATE_DIM: usize = 13;
pub const KNOT_DIM: usize = STATE_DIM + 3;

/// One single-stance phase of the prescribed contact sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub stance_foot: Foot,
    pub knot_count: usize,
    pub duration_init: f64,
    pub duration_min: f64,
    pub duration_max: f64,
}

/// Prescribed sequence of stance phases; durations stay optimizable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContactSchedule {
    pub phases: Vec<PhaseSpec>,
}

impl ContactSchedule {
    /// Grounded-run turn schedule: starts mid right-stance (the left-swing
    /// apex), then three full alternating phases. Touchdowns land at the four
    /// phase boundaries, the last one at maneuver end.
    pub fn four_step_turn(knots_per_phase: usize, duration_min: f64, duration_max: f64) -> Self {
        let mid = 0.5 * (duration_min + duration_max);
        let mut phases = Vec::new();
        phases.push(PhaseSpec {
            stance_foot: Foot::Right,
            knot_count: knots_per_phase,
            duration_init: 0.5 * mid,
            duration_min: 0.5 * duration_min,
            duration_max: 0.5 * duration_max,
        });
        for i in 0..3 {
            let foot = if i % 2 == 0 { Foot::Left } else { Foot::Right };
            phases.push(PhaseSpec {
                stance_foot: foot,
                knot_count: knots_per_phase,
                duration_init: mid,
                duration_min,
                duration_max,
            });
        }
        Self { phases }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.phases.is_empty() {
            return Err("schedule must contain at least one phase".into());
        }
        for (i, ph) in self.phases.iter().enumerate() {
            if ph.knot_count < 2 {
                return Err(format!("phase {i}: need at least 2 knots"));
            }
            if !(ph.duration_min > 0.0 && ph.duration_min <= ph.duration_max) {
                return Err(format!("phase {i}: bad duration bounds"));
            }
            if !(ph.duration_init > 0.0) {
                return Err(format!("phase {i}: duration must be positive"));
            }
            if i > 0 && self.phases[i - 1].stance_foot == ph.stance_foot {
                return Err(format!("phase {i}: stance feet must alternate"));
            }
        }
        Ok(())
    }
}

/// Boundary conditions of the maneuver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub heading_speed: f64,
    pub initial_yaw: f64,
    pub terminal_yaw: f64,
    pub body_height: f64,
}

impl BoundarySpec {
    pub fn turn(heading_speed: f64, body_height: f64) -> Self {
        Self {
            heading_speed,
            initial_yaw: 0.0,
            terminal_yaw: -std::f64::consts::FRAC_PI_2,
            body_height,
        }
    }

    pub fn validate(&self, params: &RigidBodyParams) -> Result<(), String> {
        if !self.heading_speed.is_finite() || self.heading_speed < 0.0 {
            return Err(format!("heading speed must be >= 0, got {}", self.heading_speed));
        }
        if self.body_height <= 0.0 || self.body_height > params.leg_length_max {
            return Err(format!(
                "body height {} outside (0, {}]",
                self.body_height, params.leg_length_max
            ));
        }
        Ok(())
    }
}

/// Transferability constraint limits and objective weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintLimits {
    pub grf_max: f64,
    pub friction: f64,
    pub yank_max: f64,
    pub lateral_margin: f64,
    pub nominal_leg_length: f64,
    pub weight_smoothness: f64,
    pub weight_yank: f64,
    pub weight_leg_deviation: f64,
}

impl Default for ConstraintLimits {
    fn default() -> Self {
        Self {
            grf_max: 500.0,
            friction: 0.6,
            yank_max: 10_000.0,
            lateral_margin: 0.06,
            nominal_leg_length: 0.8,
            weight_smoothness: 1e-4,
            weight_yank: 1e-6,
            weight_leg_deviation: 1.0,
        }
    }
}

/// Decision-vector layout: a bijection between named quantities and indices.
#[derive(Debug, Clone)]
pub struct DecisionLayout {
    knot_counts: Vec<usize>,
    phase_offsets: Vec<usize>,
    foothold_offset: usize,
    duration_offset: usize,
    num_vars: usize,
}

impl DecisionLayout {
    pub fn new(schedule: &ContactSchedule) -> Self {
        let knot_counts: Vec<usize> = schedule.phases.iter().map(|p| p.knot_count).collect();
        let mut phase_offsets = Vec::with_capacity(knot_counts.len());
        let mut off = 0;
        for &k in &knot_counts {
            phase_offsets.push(off);
            off += k * KNOT_DIM;
        }
        let foothold_offset = off;
        let duration_offset = foothold_offset + 3 * knot_counts.len();
        let num_vars = duration_offset + knot_counts.len();
        Self { knot_counts, phase_offsets, foothold_offset, duration_offset, num_vars }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_phases(&self) -> usize {
        self.knot_counts.len()
    }

    pub fn knots(&self, phase: usize) -> usize {
        self.knot_counts[phase]
    }

    /// Start of the 13-wide state block of (phase, knot).
    pub fn state(&self, phase: usize, knot: usize) -> usize {
        debug_assert!(knot < self.knot_counts[phase]);
        self.phase_offsets[phase] + knot * KNOT_DIM
    }

    /// Start of the 3-wide GRF block of (phase, knot).
    pub fn grf(&self, phase: usize, knot: usize) -> usize {
        self.state(phase, knot) + STATE_DIM
    }

    pub fn foothold(&self, phase: usize) -> usize {
        self.foothold_offset + 3 * phase
    }

    pub fn duration(&self, phase: usize) -> usize {
        self.duration_offset + phase
    }
}

/// Knot state split out of the decision vector.
#[derive(Debug, Clone, Copy)]
pub struct KnotState {
    pub p: Vector3<f64>,
    pub q: Vector4<f64>,
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl KnotState {
    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            p: Vector3::new(x[0], x[1], x[2]),
            q: Vector4::new(x[3], x[4], x[5], x[6]),
            v: Vector3::new(x[7], x[8], x[9]),
            w: Vector3::new(x[10], x[11], x[12]),
        }
    }

    pub fn write_to(&self, x: &mut [f64]) {
        x[0] = self.p.x;
        x[1] = self.p.y;
        x[2] = self.p.z;
        x[3..7].copy_from_slice(self.q.as_slice());
        x[7] = self.v.x;
        x[8] = self.v.y;
        x[9] = self.v.z;
        x[10] = self.w.x;
        x[11] = self.w.y;
        x[12] = self.w.z;
    }
}

/// Rotation matrix from (possibly non-unit) quaternion coords, plus partials.
/// Uses the homogeneous form R = M(q) / |q|^2, scale-invariant.
pub fn rotation_of(q: &Vector4<f64>) -> Matrix3<f64> {
    let (x, y, z, w) = (q[0], q[1], q[2], q[3]);
    let n = x * x + y * y + z * z + w * w;
    let m = Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    );
    m / n
}

/// d(rotation)/dq_i for i in {x, y, z, w}.
pub fn rotation_partials(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (x, y, z, w) = (q[0], q[1], q[2], q[3]);
    let n = x * x + y * y + z * z + w * w;
    let r = rotation_of(q);
    let dm = [
        Matrix3::new(2. * x, 2. * y, 2. * z, 2. * y, -2. * x, -2. * w, 2. * z, 2. * w, -2. * x),
        Matrix3::new(-2. * y, 2. * x, 2. * w, 2. * x, 2. * y, 2. * z, -2. * w, 2. * z, -2. * y),
        Matrix3::new(-2. * z, -2. * w, 2. * x, 2. * w, -2. * z, 2. * y, 2. * x, 2. * y, 2. * z),
        Matrix3::new(2. * w, -2. * z, 2. * y, 2. * z, 2. * w, -2. * x, -2. * y, 2. * x, 2. * w),
    ];
    let qs = [x, y, z, w];
    let mut out = [Matrix3::zeros(); 4];
    for i in 0..4 {
        out[i] = (dm[i] - 2.0 * qs[i] * r) / n;
    }
    out
}

/// Scale-invariant yaw and its gradient with respect to quaternion coords.
pub fn yaw_and_grad(q: &Vector4<f64>) -> (f64, Vector4<f64>) {
    let (x, y, z, w) = (q[0], q[1], q[2], q[3]);
    let a = 2.0 * (w * z + x * y);
    let b = w * w + x * x - y * y - z * z;
    let yaw = a.atan2(b);
    let da = Vector4::new(2.0 * y, 2.0 * x, 2.0 * w, 2.0 * z);
    let db = Vector4::new(2.0 * x, -2.0 * y, -2.0 * z, 2.0 * w);
    let denom = a * a + b * b;
    ((if yaw <= -std::f64::consts::PI { std::f64::consts::PI } else { yaw }), (b * da - a * db) / denom)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SRBM derivative on raw knot values (q may be non-unit).
pub fn knot_dynamics(
    state: &KnotState,
    grf: &Vector3<f64>,
    foothold: &Vector3<f64>,
    params: &RigidBodyParams,
) -> SVector<f64, 13> {
    let q = &state.q;
    let w = &state.w;
    let qd = 0.5
        * Vector4::new(
            q[3] * w.x + w.y * q[2] - w.z * q[1],
            q[3] * w.y + w.z * q[0] - w.x * q[2],
            q[3] * w.z + w.x * q[1] - w.y * q[0],
            -(w.x * q[0] + w.y * q[1] + w.z * q[2]),
        );
    let v_dot = grf / params.mass + Vector3::new(0.0, 0.0, -GRAVITY);
    let r_w = rotation_of(q);
    let inertia_w = r_w * params.inertia * r_w.transpose();
    let torque = (foothold - state.p).cross(grf);
    let rhs = torque - w.cross(&(inertia_w * w));
    let w_dot = inertia_w.lu().solve(&rhs).expect("inertia tensor is SPD");

    let mut f = SVector::<f64, 13>::zeros();
    f.fixed_rows_mut::<3>(0).copy_from(&state.v);
    f.fixed_rows_mut::<4>(3).copy_from(&qd);
    f.fixed_rows_mut::<3>(7).copy_from(&v_dot);
    f.fixed_rows_mut::<3>(10).copy_from(&w_dot);
    f
}

/// Dynamics value plus Jacobians with respect to state, GRF and foothold.
pub struct KnotDynJacobian {
    pub f: SVector<f64, 13>,
    pub df_dx: SMatrix<f64, 13, 13>,
    pub df_du: SMatrix<f64, 13, 3>,
    pub df_ds: SMatrix<f64, 13, 3>,
}

pub fn knot_dynamics_jacobian(
    state: &KnotState,
    grf: &Vector3<f64>,
    foothold: &Vector3<f64>,
    params: &RigidBodyParams,
) -> KnotDynJacobian {
    let f = knot_dynamics(state, grf, foothold, params);
    let q = &state.q;
    let w = &state.w;

    let mut df_dx = SMatrix::<f64, 13, 13>::zeros();
    let mut df_du = SMatrix::<f64, 13, 3>::zeros();
    let mut df_ds = SMatrix::<f64, 13, 3>::zeros();

    // p_dot = v
    for i in 0..3 {
        df_dx[(i, 7 + i)] = 1.0;
    }

    // q_dot rows: derivative of 1/2 (0,w) * q in coords (x, y, z, w).
    let half = 0.5;
    // d(q_dot)/dq
    df_dx[(3, 4)] = -half * w.z;
    df_dx[(3, 5)] = half * w.y;
    df_dx[(3, 6)] = half * w.x;
    df_dx[(4, 3)] = half * w.z;
    df_dx[(4, 5)] = -half * w.x;
    df_dx[(4, 6)] = half * w.y;
    df_dx[(5, 3)] = -half * w.y;
    df_dx[(5, 4)] = half * w.x;
    df_dx[(5, 6)] = half * w.z;
    df_dx[(6, 3)] = -half * w.x;
    df_dx[(6, 4)] = -half * w.y;
    df_dx[(6, 5)] = -half * w.z;
    // d(q_dot)/dw
    df_dx[(3, 10)] = half * q[3];
    df_dx[(3, 11)] = half * q[2];
    df_dx[(3, 12)] = -half * q[1];
    df_dx[(4, 10)] = -half * q[2];
    df_dx[(4, 11)] = half * q[3];
    df_dx[(4, 12)] = half * q[0];
    df_dx[(5, 10)] = half * q[1];
    df_dx[(5, 11)] = -half * q[0];
    df_dx[(5, 12)] = half * q[3];
    df_dx[(6, 10)] = -half * q[0];
    df_dx[(6, 11)] = -half * q[1];
    df_dx[(6, 12)] = -half * q[2];

    // v_dot = u/m + g
    for i in 0..3 {
        df_du[(7 + i, i)] = 1.0 / params.mass;
    }

    // w_dot = I_w^{-1} (tau - w x (I_w w)), I_w = R I R'.
    let r_w = rotation_of(q);
    let r_parts = rotation_partials(q);
    let inertia_w = r_w * params.inertia * r_w.transpose();
    let inertia_lu = inertia_w.lu();
    let w_dot = f.fixed_rows::<3>(10).into_owned();

    // d(w_dot)/dq_i = I_w^{-1} (-w x (dI w) - dI * w_dot)
    for i in 0..4 {
        let di = r_parts[i] * params.inertia * r_w.transpose()
            + r_w * params.inertia * r_parts[i].transpose();
        let rhs = -w.cross(&(di * w)) - di * w_dot;
        let col = inertia_lu.solve(&rhs).expect("inertia tensor is SPD");
        for row in 0..3 {
            df_dx[(10 + row, 3 + i)] = col[row];
        }
    }

    // d(w_dot)/dw = I_w^{-1} (skew(I_w w) - skew(w) I_w)
    let dw = inertia_lu
        .solve(&(skew(&(inertia_w * w)) - skew(w) * inertia_w))
        .expect("inertia tensor is SPD");
    for row in 0..3 {
        for col in 0..3 {
            df_dx[(10 + row, 10 + col)] = dw[(row, col)];
        }
    }

    // d(w_dot)/dp = I_w^{-1} skew(u); d(w_dot)/ds = -I_w^{-1} skew(u)
    let dp = inertia_lu.solve(&skew(grf)).expect("inertia tensor is SPD");
    for row in 0..3 {
        for col in 0..3 {
            df_dx[(10 + row, col)] = dp[(row, col)];
            df_ds[(10 + row, col)] = -dp[(row, col)];
        }
    }

    // d(w_dot)/du = I_w^{-1} skew(s - p)
    let du = inertia_lu
        .solve(&skew(&(foothold - state.p)))
        .expect("inertia tensor is SPD");
    for row in 0..3 {
        for col in 0..3 {
            df_du[(10 + row, col)] = du[(row, col)];
        }
    }

    KnotDynJacobian { f, df_dx, df_du, df_ds }
}

/// The transcribed four-step-turn NLP.
pub struct TranscribedNlp {
    pub schedule: ContactSchedule,
    pub params: RigidBodyParams,
    pub boundary: BoundarySpec,
    pub limits: ConstraintLimits,
    pub layout: DecisionLayout,
    num_eq: usize,
    num_ineq: usize,
    /// Internal scaling of the 13 defect rows per interval. The angular rows
    /// are orders of magnitude stiffer in the force variables (small inertia,
    /// large force levers), so they are scaled down to balance the Jacobian.
    defect_row_scale: [f64; 13],
    defect_rows: usize,
}

/// Row-block bookkeeping shared by evaluation and gradient accumulation.
struct RowCursor {
    eq: usize,
    ineq: usize,
}

impl TranscribedNlp {
    pub fn new(
        schedule: ContactSchedule,
        params: RigidBodyParams,
        boundary: BoundarySpec,
        limits: ConstraintLimits,
    ) -> Result<Self, String> {
        schedule.validate()?;
        params.validate()?;
        boundary.validate(&params)?;
        let layout = DecisionLayout::new(&schedule);

        let phases = schedule.phases.len();
        let intervals: usize = schedule.phases.iter().map(|p| p.knot_count - 1).sum();
        let knots: usize = schedule.phases.iter().map(|p| p.knot_count).sum();

        let num_eq = intervals * STATE_DIM        // collocation defects
            + (phases - 1) * STATE_DIM            // phase-boundary continuity
            + 4; // terminal orientation direction
        let num_ineq = knots                      // friction cone
            + knots                               // vertical force non-negative
            + knots                               // GRF magnitude
            + intervals * 6                       // yank, two-sided, 3 comps
            + knots * 2                           // leg length min/max
            + knots                               // lateral no-crossing
            + phases * 2; // duration bounds

        let mut defect_row_scale = [1.0; 13];
        let inertia_char = params.inertia.diagonal().min();
        let lever = params.leg_length_max;
        // Ratio of force sensitivities: v-rows see 1/m, w-rows see lever/I.
        let w_scale = (inertia_char / (params.mass * lever * lever)).min(1.0);
        for row in 10..13 {
            defect_row_scale[row] = w_scale;
        }
        let defect_rows = intervals * STATE_DIM;

        Ok(Self {
            schedule,
            params,
            boundary,
            limits,
            layout,
            num_eq,
            num_ineq,
            defect_row_scale,
            defect_rows,
        })
    }

    /// Variables pinned by boundary conditions: full initial state, terminal
    /// planar velocity and height, and foothold z = 0 (flat ground).
    pub fn fixed_variables(&self) -> Vec<(usize, f64)> {
        let l = &self.layout;
        let b = &self.boundary;
        let mut fixed = Vec::new();

        let init = KnotState {
            p: Vector3::new(0.0, 0.0, b.body_height),
            q: quat_of_yaw(b.initial_yaw),
            v: heading_velocity(b.heading_speed, b.initial_yaw),
            w: Vector3::zeros(),
        };
        let mut buf = [0.0; STATE_DIM];
        init.write_to(&mut buf);
        let s0 = l.state(0, 0);
        for (i, v) in buf.iter().enumerate() {
            fixed.push((s0 + i, *v));
        }

        let last_phase = l.num_phases() - 1;
        let st = l.state(last_phase, l.knots(last_phase) - 1);
        let v_t = heading_velocity(b.heading_speed, b.terminal_yaw);
        fixed.push((st + 2, b.body_height));
        fixed.push((st + 7, v_t.x));
        fixed.push((st + 8, v_t.y));
        fixed.push((st + 9, v_t.z));

        for p in 0..l.num_phases() {
            fixed.push((l.foothold(p) + 2, 0.0));
        }
        fixed
    }

    pub fn total_duration(&self, x: &[f64]) -> f64 {
        (0..self.layout.num_phases()).map(|p| x[self.layout.duration(p)]).sum()
    }

    fn interval_h(&self, x: &[f64], phase: usize) -> (f64, f64) {
        let segs = (self.layout.knots(phase) - 1) as f64;
        let d = x[self.layout.duration(phase)];
        (d / segs, 1.0 / segs)
    }

    fn knot(&self, x: &[f64], phase: usize, k: usize) -> (KnotState, Vector3<f64>) {
        let s = self.layout.state(phase, k);
        let g = self.layout.grf(phase, k);
        (
            KnotState::from_slice(&x[s..s + STATE_DIM]),
            Vector3::new(x[g], x[g + 1], x[g + 2]),
        )
    }

    fn foothold_of(&self, x: &[f64], phase: usize) -> Vector3<f64> {
        let i = self.layout.foothold(phase);
        Vector3::new(x[i], x[i + 1], x[i + 2])
    }

    /// Leg vector from stance hip to foothold, plus hip partials wrt q.
    fn leg_vector(
        &self,
        state: &KnotState,
        foothold: &Vector3<f64>,
        foot: Foot,
    ) -> (Vector3<f64>, [Vector3<f64>; 4]) {
        let offset = self.params.hip_offset(foot);
        let r_w = rotation_of(&state.q);
        let hip = state.p + r_w * offset;
        let parts = rotation_partials(&state.q);
        let mut dhip_dq = [Vector3::zeros(); 4];
        for i in 0..4 {
            dhip_dq[i] = parts[i] * offset;
        }
        (foothold - hip, dhip_dq)
    }

    pub fn terminal_quat_target(&self) -> Vector4<f64> {
        quat_of_yaw(self.boundary.terminal_yaw)
    }

    /// Max collocation defect of `x` in physical units, re-derived from the
    /// dynamics alone.
    pub fn max_defect(&self, x: &[f64]) -> f64 {
        let mut eq = vec![0.0; self.num_eq];
        let mut ineq = vec![0.0; self.num_ineq];
        self.constraints(x, &mut eq, &mut ineq);
        eq[..self.defect_rows]
            .iter()
            .enumerate()
            .fold(0.0f64, |a, (i, d)| a.max((d / self.defect_row_scale[i % STATE_DIM]).abs()))
    }

    /// Max violation over all non-defect constraint rows.
    pub fn max_path_violation(&self, x: &[f64]) -> f64 {
        let mut eq = vec![0.0; self.num_eq];
        let mut ineq = vec![0.0; self.num_ineq];
        self.constraints(x, &mut eq, &mut ineq);
        let ve = eq[self.defect_rows..].iter().fold(0.0f64, |a, c| a.max(c.abs()));
        let vi = ineq.iter().fold(0.0f64, |a, g| a.max(*g));
        ve.max(vi)
    }

    /// Deterministic cold-start guess: CoM on a 90-degree circular arc, yaw
    /// linear in time, vertical single-stance force, footholds under hips.
    pub fn initial_guess(&self) -> Vec<f64> {
        let l = &self.layout;
        let b = &self.boundary;
        let mut x = vec![0.0; l.num_vars()];

        let durations: Vec<f64> = self.schedule.phases.iter().map(|p| p.duration_init).collect();
        let total: f64 = durations.iter().sum();
        let dyaw = crate::srbm::wrap_angle(b.terminal_yaw - b.initial_yaw);
        let speed = b.heading_speed;
        // Arc through the turn: radius from path length = speed * total time.
        let radius = speed * total / dyaw.abs().max(1e-9);

        let pos_at = |t: f64| -> (Vector3<f64>, f64) {
            let frac = (t / total).clamp(0.0, 1.0);
            let yaw = b.initial_yaw + dyaw * frac;
            let theta = dyaw.abs() * frac;
            let sgn = dyaw.signum();
            let xy = if speed > 1e-9 {
                Vector3::new(radius * theta.sin(), sgn * radius * (1.0 - theta.cos()), b.body_height)
            } else {
                Vector3::new(0.0, 0.0, b.body_height)
            };
            (xy, yaw)
        };

        let mut t0 = 0.0;
        for (p, ph) in self.schedule.phases.iter().enumerate() {
            let k_count = l.knots(p);
            let d = durations[p];
            // Foothold under the stance hip at phase midpoint.
            let (mid, mid_yaw) = pos_at(t0 + 0.5 * d);
            let offset = self.params.hip_offset(ph.stance_foot);
            let rot = rotation_of(&quat_of_yaw(mid_yaw));
            let hip = mid + rot * offset;
            let foothold = Vector3::new(hip.x, hip.y, 0.0);

            for k in 0..k_count {
                let t = t0 + d * k as f64 / (k_count - 1) as f64;
                let (pos, yaw) = pos_at(t);
                let state = KnotState {
                    p: pos,
                    q: quat_of_yaw(yaw),
                    v: heading_velocity(speed, yaw),
                    w: Vector3::new(0.0, 0.0, dyaw / total),
                };
                let si = l.state(p, k);
                state.write_to(&mut x[si..si + STATE_DIM]);
                // Gravity-compensating force along the leg line through the
                // CoM: zero initial torque, so angular defects start small.
                let leg = pos - foothold;
                let f = leg * (self.params.mass * GRAVITY / leg.z.max(1e-6));
                let gi = l.grf(p, k);
                x[gi] = f.x;
                x[gi + 1] = f.y;
                x[gi + 2] = f.z;
            }
            let fi = l.foothold(p);
            x[fi] = foothold.x;
            x[fi + 1] = foothold.y;
            x[fi + 2] = 0.0;
            x[l.duration(p)] = d;
            t0 += d;
        }
        x
    }
}

/// Identifies a constraint row during Jacobian traversal.
#[derive(Debug, Clone, Copy)]
enum JacRow {
    Eq(usize),
    Ineq(usize),
}

impl TranscribedNlp {
    /// Walks every nonzero Jacobian entry exactly once. Both the weighted
    /// transpose product and the sparse row extraction are built on this, so
    /// the derivative formulas live in one place. Entries for the same
    /// (row, col) pair may repeat; consumers must accumulate.
    fn visit_jacobian<F: FnMut(JacRow, usize, f64)>(&self, x: &[f64], sink: &mut F) {
        let l = &self.layout;
        let lim = &self.limits;
        let mut cur = RowCursor { eq: 0, ineq: 0 };

        // Collocation defects.
        for p in 0..l.num_phases() {
            let (h, dh_dd) = self.interval_h(x, p);
            let foothold = self.foothold_of(x, p);
            let jacs: Vec<KnotDynJacobian> = (0..l.knots(p))
                .map(|k| {
                    let (state, grf) = self.knot(x, p, k);
                    knot_dynamics_jacobian(&state, &grf, &foothold, &self.params)
                })
                .collect();
            for k in 0..l.knots(p) - 1 {
                let (a, b) = (&jacs[k], &jacs[k + 1]);
                let si = l.state(p, k);
                let sj = l.state(p, k + 1);
                let gi = l.grf(p, k);
                let gj = l.grf(p, k + 1);
                let fi = l.foothold(p);
                let fsum = a.f + b.f;
                for row in 0..STATE_DIM {
                    let sc = self.defect_row_scale[row];
                    let rid = JacRow::Eq(cur.eq + row);
                    let wh = -0.5 * h * sc;
                    sink(rid, sj + row, sc);
                    sink(rid, si + row, -sc);
                    for c in 0..STATE_DIM {
                        let va = a.df_dx[(row, c)];
                        if va != 0.0 {
                            sink(rid, si + c, wh * va);
                        }
                        let vb = b.df_dx[(row, c)];
                        if vb != 0.0 {
                            sink(rid, sj + c, wh * vb);
                        }
                    }
                    for c in 0..3 {
                        let va = a.df_du[(row, c)];
                        if va != 0.0 {
                            sink(rid, gi + c, wh * va);
                        }
                        let vb = b.df_du[(row, c)];
                        if vb != 0.0 {
                            sink(rid, gj + c, wh * vb);
                        }
                        let vs = a.df_ds[(row, c)] + b.df_ds[(row, c)];
                        if vs != 0.0 {
                            sink(rid, fi + c, wh * vs);
                        }
                    }
                    sink(rid, l.duration(p), -0.5 * dh_dd * sc * fsum[row]);
                }
                cur.eq += STATE_DIM;
            }
        }

        // Continuity.
        for p in 0..l.num_phases() - 1 {
            let end = l.state(p, l.knots(p) - 1);
            let start = l.state(p + 1, 0);
            for row in 0..STATE_DIM {
                sink(JacRow::Eq(cur.eq + row), start + row, 1.0);
                sink(JacRow::Eq(cur.eq + row), end + row, -1.0);
            }
            cur.eq += STATE_DIM;
        }

        // Terminal orientation direction: J = I - t t'.
        {
            let last = l.num_phases() - 1;
            let si = l.state(last, l.knots(last) - 1);
            let t = self.terminal_quat_target();
            for row in 0..4 {
                let rid = JacRow::Eq(cur.eq + row);
                for c in 0..4 {
                    let v = if row == c { 1.0 } else { 0.0 } - t[row] * t[c];
                    if v != 0.0 {
                        sink(rid, si + 3 + c, v);
                    }
                }
            }
            cur.eq += 4;
        }

        // Force constraints: friction cone, vertical force, magnitude.
        for p in 0..l.num_phases() {
            for k in 0..l.knots(p) {
                let (_, grf) = self.knot(x, p, k);
                let gi = l.grf(p, k);
                let nxy = (grf.x * grf.x + grf.y * grf.y).sqrt().max(1e-12);
                sink(JacRow::Ineq(cur.ineq), gi, grf.x / nxy);
                sink(JacRow::Ineq(cur.ineq), gi + 1, grf.y / nxy);
                sink(JacRow::Ineq(cur.ineq), gi + 2, -lim.friction);
                sink(JacRow::Ineq(cur.ineq + 1), gi + 2, -1.0);
                let n = grf.norm().max(1e-12);
                for c in 0..3 {
                    sink(JacRow::Ineq(cur.ineq + 2), gi + c, grf[c] / n);
                }
                cur.ineq += 3;
            }
        }

        // Yank.
        for p in 0..l.num_phases() {
            let (_, dh_dd) = self.interval_h(x, p);
            for k in 0..l.knots(p) - 1 {
                let gi = l.grf(p, k);
                let gj = l.grf(p, k + 1);
                for c in 0..3 {
                    sink(JacRow::Ineq(cur.ineq), gj + c, 1.0);
                    sink(JacRow::Ineq(cur.ineq), gi + c, -1.0);
                    sink(JacRow::Ineq(cur.ineq), l.duration(p), -lim.yank_max * dh_dd);
                    sink(JacRow::Ineq(cur.ineq + 1), gj + c, -1.0);
                    sink(JacRow::Ineq(cur.ineq + 1), gi + c, 1.0);
                    sink(JacRow::Ineq(cur.ineq + 1), l.duration(p), -lim.yank_max * dh_dd);
                    cur.ineq += 2;
                }
            }
        }

        // Leg length band.
        for (p, ph) in self.schedule.phases.iter().enumerate() {
            let foothold = self.foothold_of(x, p);
            let fi = l.foothold(p);
            for k in 0..l.knots(p) {
                let (state, _) = self.knot(x, p, k);
                let si = l.state(p, k);
                let (leg, dhip_dq) = self.leg_vector(&state, &foothold, ph.stance_foot);
                let max_row = JacRow::Ineq(cur.ineq);
                let min_row = JacRow::Ineq(cur.ineq + 1);
                cur.ineq += 2;
                for c in 0..3 {
                    let v = 2.0 * leg[c];
                    sink(max_row, fi + c, v);
                    sink(max_row, si + c, -v);
                    sink(min_row, fi + c, -v);
                    sink(min_row, si + c, v);
                }
                for i in 0..4 {
                    let v = 2.0 * leg.dot(&dhip_dq[i]);
                    sink(max_row, si + 3 + i, -v);
                    sink(min_row, si + 3 + i, v);
                }
            }
        }

        // No-crossing.
        for (p, ph) in self.schedule.phases.iter().enumerate() {
            let foothold = self.foothold_of(x, p);
            let fi = l.foothold(p);
            let side = ph.stance_foot.lateral_sign();
            for k in 0..l.knots(p) {
                let rid = JacRow::Ineq(cur.ineq);
                cur.ineq += 1;
                let (state, _) = self.knot(x, p, k);
                let si = l.state(p, k);
                let (yaw, dyaw_dq) = yaw_and_grad(&state.q);
                let (sin_y, cos_y) = yaw.sin_cos();
                let dx = foothold.x - state.p.x;
                let dy = foothold.y - state.p.y;
                // lateral = -sin(yaw) dx + cos(yaw) dy; g = margin - side*lateral
                sink(rid, fi, side * sin_y);
                sink(rid, fi + 1, -side * cos_y);
                sink(rid, si, -side * sin_y);
                sink(rid, si + 1, side * cos_y);
                let dlat_dyaw = -cos_y * dx - sin_y * dy;
                for i in 0..4 {
                    let v = -side * dlat_dyaw * dyaw_dq[i];
                    if v != 0.0 {
                        sink(rid, si + 3 + i, v);
                    }
                }
            }
        }

        // Duration bounds.
        for p in 0..l.num_phases() {
            sink(JacRow::Ineq(cur.ineq), l.duration(p), -1.0);
            sink(JacRow::Ineq(cur.ineq + 1), l.duration(p), 1.0);
            cur.ineq += 2;
        }

        debug_assert_eq!(cur.eq, self.num_eq);
        debug_assert_eq!(cur.ineq, self.num_ineq);
    }
}

pub fn quat_of_yaw(yaw: f64) -> Vector4<f64> {
    Vector4::new(0.0, 0.0, (0.5 * yaw).sin(), (0.5 * yaw).cos())
}

pub fn heading_velocity(speed: f64, yaw: f64) -> Vector3<f64> {
    Vector3::new(speed * yaw.cos(), speed * yaw.sin(), 0.0)
}

impl ConstrainedProblem for TranscribedNlp {
    fn num_vars(&self) -> usize {
        self.layout.num_vars()
    }

    fn num_eq(&self) -> usize {
        self.num_eq
    }

    fn num_ineq(&self) -> usize {
        self.num_ineq
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let lim = &self.limits;
        let mut obj = 0.0;
        for (p, ph) in self.schedule.phases.iter().enumerate() {
            let (h, _) = self.interval_h(x, p);
            let foothold = self.foothold_of(x, p);
            for k in 0..self.layout.knots(p) {
                let (state, grf) = self.knot(x, p, k);
                if k + 1 < self.layout.knots(p) {
                    let (_, grf_next) = self.knot(x, p, k + 1);
                    let df = grf_next - grf;
                    let d2 = df.norm_squared();
                    obj += lim.weight_smoothness * d2 + lim.weight_yank * d2 / h.max(1e-9);
                }
                let (leg, _) = self.leg_vector(&state, &foothold, ph.stance_foot);
                let dev = leg.norm().max(1e-12) - lim.nominal_leg_length;
                obj += lim.weight_leg_deviation * dev * dev;
            }
        }
        obj
    }

    fn objective_gradient(&self, x: &[f64], grad: &mut [f64]) {
        grad.fill(0.0);
        let lim = &self.limits;
        let l = &self.layout;
        for (p, ph) in self.schedule.phases.iter().enumerate() {
            let (h, dh_dd) = self.interval_h(x, p);
            let foothold = self.foothold_of(x, p);
            for k in 0..l.knots(p) {
                let (state, grf) = self.knot(x, p, k);
                if k + 1 < l.knots(p) {
                    let (_, grf_next) = self.knot(x, p, k + 1);
                    let df = grf_next - grf;
                    let scale = 2.0 * (lim.weight_smoothness + lim.weight_yank / h.max(1e-9));
                    let gi = l.grf(p, k);
                    let gj = l.grf(p, k + 1);
                    for c in 0..3 {
                        grad[gi + c] -= scale * df[c];
                        grad[gj + c] += scale * df[c];
                    }
                    // d/d(duration) of yank term: -w_y |df|^2 / h^2 * dh/dd
                    grad[l.duration(p)] -=
                        lim.weight_yank * df.norm_squared() / (h * h).max(1e-18) * dh_dd;
                }
                let (leg, dhip_dq) = self.leg_vector(&state, &foothold, ph.stance_foot);
                let norm = leg.norm().max(1e-12);
                let dev = norm - lim.nominal_leg_length;
                let coeff = 2.0 * lim.weight_leg_deviation * dev / norm;
                let si = l.state(p, k);
                let fi = l.foothold(p);
                for c in 0..3 {
                    grad[fi + c] += coeff * leg[c];
                    grad[si + c] -= coeff * leg[c];
                }
                for i in 0..4 {
                    grad[si + 3 + i] -= coeff * leg.dot(&dhip_dq[i]);
                }
            }
        }
    }

    fn constraints(&self, x: &[f64], eq: &mut [f64], ineq: &mut [f64]) {
        let l = &self.layout;
        let lim = &self.limits;
        let mut cur = RowCursor { eq: 0, ineq: 0 };

        // Collocation defects.
        for p in 0..l.num_phases() {
            let (h, _) = self.interval_h(x, p);
            let foothold = self.foothold_of(x, p);
            let mut prev: Option<(KnotState, SVector<f64, 13>)> = None;
            for k in 0..l.knots(p) {
                let (state, grf) = self.knot(x, p, k);
                let f = knot_dynamics(&state, &grf, &foothold, &self.params);
                if let Some((prev_state, prev_f)) = prev {
                    let si = l.state(p, k);
                    let sp = l.state(p, k - 1);
                    for row in 0..STATE_DIM {
                        let _ = prev_state;
                        eq[cur.eq + row] = self.defect_row_scale[row]
                            * (x[si + row] - x[sp + row] - 0.5 * h * (prev_f[row] + f[row]));
                    }
                    cur.eq += STATE_DIM;
                }
                prev = Some((state, f));
            }
        }

        // Continuity across phase boundaries.
        for p in 0..l.num_phases() - 1 {
            let end = l.state(p, l.knots(p) - 1);
            let start = l.state(p + 1, 0);
            for row in 0..STATE_DIM {
                eq[cur.eq + row] = x[start + row] - x[end + row];
            }
            cur.eq += STATE_DIM;
        }

        // Terminal orientation: q_T parallel to the target quaternion.
        {
            let last = l.num_phases() - 1;
            let si = l.state(last, l.knots(last) - 1);
            let q = Vector4::new(x[si + 3], x[si + 4], x[si + 5], x[si + 6]);
            let t = self.terminal_quat_target();
            let proj = q.dot(&t);
            let c = q - proj * t;
            for row in 0..4 {
                eq[cur.eq + row] = c[row];
            }
            cur.eq += 4;
        }

        // Per-knot force constraints.
        for p in 0..l.num_phases() {
            for k in 0..l.knots(p) {
                let (_, grf) = self.knot(x, p, k);
                let fxy = (grf.x * grf.x + grf.y * grf.y).sqrt();
                ineq[cur.ineq] = fxy - lim.friction * grf.z;
                ineq[cur.ineq + 1] = -grf.z;
                ineq[cur.ineq + 2] = grf.norm() - lim.grf_max;
                cur.ineq += 3;
            }
        }

        // Yank bounds, within phases only.
        for p in 0..l.num_phases() {
            let (h, _) = self.interval_h(x, p);
            for k in 0..l.knots(p) - 1 {
                let (_, grf) = self.knot(x, p, k);
                let (_, grf_next) = self.knot(x, p, k + 1);
                for c in 0..3 {
                    let df = grf_next[c] - grf[c];
                    ineq[cur.ineq] = df - lim.yank_max * h;
                    ineq[cur.ineq + 1] = -df - lim.yank_max * h;
                    cur.ineq += 2;
                }
            }
        }

        // Leg length band.
        for (p, ph) in self.schedule.phases.iter().enumerate() {
            let foothold = self.foothold_of(x, p);
            for k in 0..l.knots(p) {
                let (state, _) = self.knot(x, p, k);
                let (leg, _) = self.leg_vector(&state, &foothold, ph.stance_foot);
                let n2 = leg.norm_squared();
                ineq[cur.ineq] = n2 - self.params.leg_length_max.powi(2);
                ineq[cur.ineq + 1] = self.params.leg_length_min.powi(2) - n2;
                cur.ineq += 2;
            }
        }

        // Lateral no-crossing in the yaw-aligned body frame.
        for (p, ph) in self.schedule.phases.iter().enumerate() {
            let foothold = self.foothold_of(x, p);
            let side = ph.stance_foot.lateral_sign();
            for k in 0..l.knots(p) {
                let (state, _) = self.knot(x, p, k);
                let (yaw, _) = yaw_and_grad(&state.q);
                let dx = foothold.x - state.p.x;
                let dy = foothold.y - state.p.y;
                let lateral = -yaw.sin() * dx + yaw.cos() * dy;
                ineq[cur.ineq] = lim.lateral_margin - side * lateral;
                cur.ineq += 1;
            }
        }

        // Duration bounds.
        for (p, ph) in self.schedule.phases.iter().enumerate() {
            let d = x[l.duration(p)];
            ineq[cur.ineq] = ph.duration_min - d;
            ineq[cur.ineq + 1] = d - ph.duration_max;
            cur.ineq += 2;
        }

        debug_assert_eq!(cur.eq, self.num_eq);
        debug_assert_eq!(cur.ineq, self.num_ineq);
    }

    fn add_weighted_jacobians(&self, x: &[f64], w_eq: &[f64], w_ineq: &[f64], grad: &mut [f64]) {
        self.visit_jacobian(x, &mut |row, col, val| match row {
            JacRow::Eq(r) => grad[col] += w_eq[r] * val,
            JacRow::Ineq(r) => grad[col] += w_ineq[r] * val,
        });
    }

    fn jacobian_rows(
        &self,
        x: &[f64],
        eq_rows: &mut [Vec<(u32, f64)>],
        ineq_rows: &mut [Vec<(u32, f64)>],
    ) -> bool {
        for row in eq_rows.iter_mut() {
            row.clear();
        }
        for row in ineq_rows.iter_mut() {
            row.clear();
        }
        self.visit_jacobian(x, &mut |row, col, val| match row {
            JacRow::Eq(r) => eq_rows[r].push((col as u32, val)),
            JacRow::Ineq(r) => ineq_rows[r].push((col as u32, val)),
        });
        true
    }

    fn violation_of(&self, eq: &[f64], ineq: &[f64]) -> f64 {
        let vd = eq[..self.defect_rows]
            .iter()
            .enumerate()
            .fold(0.0f64, |a, (i, d)| a.max((d / self.defect_row_scale[i % STATE_DIM]).abs()));
        let ve = eq[self.defect_rows..].iter().fold(0.0f64, |a, c| a.max(c.abs()));
        let vi = ineq.iter().fold(0.0f64, |a, g| a.max(*g));
        vd.max(ve).max(vi.max(0.0))
    }

    fn variable_scaling(&self) -> Option<Vec<f64>> {
        let l = &self.layout;
        let mut scale = vec![1.0; l.num_vars()];
        let force_scale = self.params.mass * GRAVITY / 3.0;
        for p in 0..l.num_phases() {
            for k in 0..l.knots(p) {
                let gi = l.grf(p, k);
                for c in 0..3 {
                    scale[gi + c] = force_scale;
                }
            }
            scale[l.duration(p)] = 0.3;
        }
        Some(scale)
    }

    fn objective_curvature_rows(&self, x: &[f64], out: &mut Vec<(f64, Vec<(u32, f64)>)>) -> bool {
        let l = &self.layout;
        let lim = &self.limits;
        out.clear();
        for (p, ph) in self.schedule.phases.iter().enumerate() {
            let (h, _) = self.interval_h(x, p);
            let foothold = self.foothold_of(x, p);
            let fi = l.foothold(p);
            let smooth_weight = lim.weight_smoothness + lim.weight_yank / h.max(1e-9);
            for k in 0..l.knots(p) {
                if k + 1 < l.knots(p) {
                    let gi = l.grf(p, k);
                    let gj = l.grf(p, k + 1);
                    for c in 0..3 {
                        out.push((
                            smooth_weight,
                            vec![((gj + c) as u32, 1.0), ((gi + c) as u32, -1.0)],
                        ));
                    }
                }
                let (state, _) = self.knot(x, p, k);
                let si = l.state(p, k);
                let (leg, dhip_dq) = self.leg_vector(&state, &foothold, ph.stance_foot);
                let norm = leg.norm().max(1e-12);
                let unit = leg / norm;
                let mut row = Vec::with_capacity(10);
                for c in 0..3 {
                    row.push(((fi + c) as u32, unit[c]));
                    row.push(((si + c) as u32, -unit[c]));
                }
                for i in 0..4 {
                    row.push(((si + 3 + i) as u32, -unit.dot(&dhip_dq[i])));
                }
                out.push((lim.weight_leg_deviation, row));
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajopt::nlp::finite_difference_gradient;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn turn_nlp(speed: f64) -> TranscribedNlp {
        let schedule = ContactSchedule::four_step_turn(10, 0.2, 0.6);
        TranscribedNlp::new(
            schedule,
            RigidBodyParams::default(),
            BoundarySpec::turn(speed, 0.8),
            ConstraintLimits::default(),
        )
        .unwrap()
    }

    #[test]
    fn decision_vector_length_matches_layout_count() {
        let nlp = turn_nlp(2.5);
        // 4 phases x 10 knots x (13 + 3) + 4 x 3 footholds + 4 durations.
        assert_eq!(nlp.layout.num_vars(), 656);
    }

    #[test]
    fn pack_unpack_roundtrip_is_identity() {
        let nlp = turn_nlp(1.5);
        let x = nlp.initial_guess();
        let l = &nlp.layout;
        let mut y = vec![0.0; l.num_vars()];
        for p in 0..l.num_phases() {
            for k in 0..l.knots(p) {
                let (state, grf) = nlp.knot(&x, p, k);
                let si = l.state(p, k);
                state.write_to(&mut y[si..si + STATE_DIM]);
                let gi = l.grf(p, k);
                y[gi..gi + 3].copy_from_slice(grf.as_slice());
            }
            let f = nlp.foothold_of(&x, p);
            let fi = l.foothold(p);
            y[fi..fi + 3].copy_from_slice(f.as_slice());
            y[l.duration(p)] = x[l.duration(p)];
        }
        assert_eq!(x, y);
    }

    #[test]
    fn hover_solution_has_zero_defects() {
        // Constant state, single vertical force through the CoM: the dynamics
        // are identically satisfied, so every defect row must vanish.
        let schedule = ContactSchedule {
            phases: vec![PhaseSpec {
                stance_foot: Foot::Left,
                knot_count: 10,
                duration_init: 0.4,
                duration_min: 0.2,
                duration_max: 0.6,
            }],
        };
        let params = RigidBodyParams::default();
        let nlp = TranscribedNlp::new(
            schedule,
            params.clone(),
            BoundarySpec { heading_speed: 0.0, initial_yaw: 0.0, terminal_yaw: 0.0, body_height: 0.8 },
            ConstraintLimits::default(),
        )
        .unwrap();
        let mut x = vec![0.0; nlp.layout.num_vars()];
        let hover = KnotState {
            p: Vector3::new(0.0, 0.0, 0.8),
            q: Vector4::new(0.0, 0.0, 0.0, 1.0),
            v: Vector3::zeros(),
            w: Vector3::zeros(),
        };
        for k in 0..10 {
            let si = nlp.layout.state(0, k);
            hover.write_to(&mut x[si..si + STATE_DIM]);
            let gi = nlp.layout.grf(0, k);
            x[gi + 2] = params.mass * GRAVITY;
        }
        let fi = nlp.layout.foothold(0);
        x[fi] = 0.0;
        x[fi + 1] = 0.0;
        x[fi + 2] = 0.0;
        x[nlp.layout.duration(0)] = 0.4;
        assert!(nlp.max_defect(&x) < 1e-10);
    }

    #[test]
    fn friction_cone_violation_magnitude() {
        let nlp = turn_nlp(1.0);
        let mut x = nlp.initial_guess();
        let gi = nlp.layout.grf(0, 0);
        x[gi] = 30.0;
        x[gi + 1] = 0.0;
        x[gi + 2] = 40.0;
        let mut eq = vec![0.0; nlp.num_eq()];
        let mut ineq = vec![0.0; nlp.num_ineq()];
        nlp.constraints(&x, &mut eq, &mut ineq);
        // First friction row: |f_xy| - mu f_z = 30 - 0.6 * 40 = 6.
        let defect_rows = 0; // friction block starts at ineq row 0
        assert!((ineq[defect_rows] - 6.0).abs() < 1e-12);
    }

    /// Random-point check of every analytic gradient against central
    /// differences: objective directly, constraints through random weights.
    #[test]
    fn gradients_match_finite_differences() {
        let nlp = turn_nlp(2.0);
        let n = nlp.num_vars();
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        for trial in 0..10 {
            let mut x = nlp.initial_guess();
            // Random but physically plausible perturbation away from the seed.
            for (i, v) in x.iter_mut().enumerate() {
                let gi = i % KNOT_DIM;
                let scale = if i >= nlp.layout.duration(0) {
                    0.05
                } else if i >= nlp.layout.foothold(0) {
                    0.2
                } else if gi >= STATE_DIM {
                    60.0
                } else {
                    0.2
                };
                *v += scale * (rng.random::<f64>() - 0.5);
            }

            let w_eq: Vec<f64> = (0..nlp.num_eq()).map(|_| rng.random::<f64>() - 0.5).collect();
            let w_ineq: Vec<f64> = (0..nlp.num_ineq()).map(|_| rng.random::<f64>() - 0.5).collect();

            let mut grad = vec![0.0; n];
            nlp.objective_gradient(&x, &mut grad);
            nlp.add_weighted_jacobians(&x, &w_eq, &w_ineq, &mut grad);

            let weighted = |x: &[f64]| -> f64 {
                let mut eq = vec![0.0; nlp.num_eq()];
                let mut ineq = vec![0.0; nlp.num_ineq()];
                nlp.constraints(x, &mut eq, &mut ineq);
                nlp.objective(x)
                    + eq.iter().zip(&w_eq).map(|(c, w)| c * w).sum::<f64>()
                    + ineq.iter().zip(&w_ineq).map(|(g, w)| g * w).sum::<f64>()
            };
            let fd = finite_difference_gradient(&weighted, &x, 1e-7);

            let scale = fd.iter().fold(1.0f64, |a, g| a.max(g.abs()));
            for i in 0..n {
                let err = (grad[i] - fd[i]).abs() / scale;
                assert!(
                    err < 1e-5,
                    "trial {trial} var {i}: analytic {} vs fd {} (rel {err:e})",
                    grad[i],
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn rotation_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = Vector4::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() + 0.5,
            );
            let parts = rotation_partials(&q);
            for i in 0..4 {
                let mut qp = q;
                let h = 1e-7;
                qp[i] += h;
                let rp = rotation_of(&qp);
                qp[i] -= 2.0 * h;
                let rm = rotation_of(&qp);
                let fd = (rp - rm) / (2.0 * h);
                assert!((parts[i] - fd).amax() < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        let mut s = ContactSchedule::four_step_turn(10, 0.2, 0.6);
        s.phases[1].stance_foot = Foot::Right; // same as phase 0
        assert!(s.validate().is_err());

        let s = ContactSchedule::four_step_turn(1, 0.2, 0.6);
        assert!(s.validate().is_err());
    }

    #[test]
    fn inconsistent_boundary_rejected() {
        let schedule = ContactSchedule::four_step_turn(10, 0.2, 0.6);
        let err = TranscribedNlp::new(
            schedule,
            RigidBodyParams::default(),
            BoundarySpec::turn(2.5, 5.0), // taller than the leg allows
            ConstraintLimits::default(),
        );
        assert!(err.is_err());
    }
}
