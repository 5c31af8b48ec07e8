//! Turn-reference generation, resampling and the library file format.

use std::path::Path;
use std::time::Duration;

use nalgebra::{UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::srbm::{Foot, RigidBodyParams, SrbmState};

use super::nlp::{self, SolveStatus, Solution, SolverOptions, WarmStart};
use super::transcribe::{
    heading_velocity, BoundarySpec, ConstraintLimits, ContactSchedule, KnotState, TranscribedNlp,
    STATE_DIM,
};

pub const LIBRARY_SCHEMA_VERSION: u32 = 1;

/// Everything needed to pose and solve the turn NLPs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajoptConfig {
    pub params: RigidBodyParams,
    pub limits: ConstraintLimits,
    pub body_height: f64,
    pub knots_per_phase: usize,
    pub duration_min: f64,
    pub duration_max: f64,
    pub sample_rate: f64,
    pub speeds: Vec<f64>,
    pub tol_feasibility: f64,
    pub tol_stationarity: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub time_budget_secs: f64,
}

impl Default for TrajoptConfig {
    fn default() -> Self {
        Self {
            params: RigidBodyParams::default(),
            limits: ConstraintLimits::default(),
            body_height: 0.8,
            knots_per_phase: 10,
            duration_min: 0.2,
            duration_max: 0.6,
            sample_rate: 40.0,
            speeds: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5],
            tol_feasibility: 1e-6,
            tol_stationarity: 1e-4,
            max_outer: 60,
            max_inner: 8000,
            time_budget_secs: 300.0,
        }
    }
}

impl TrajoptConfig {
    pub fn schedule(&self) -> ContactSchedule {
        ContactSchedule::four_step_turn(self.knots_per_phase, self.duration_min, self.duration_max)
    }

    pub fn solver_options(&self, nlp: &TranscribedNlp) -> SolverOptions {
        SolverOptions {
            tol_feasibility: self.tol_feasibility,
            tol_stationarity: self.tol_stationarity,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            time_budget: Some(Duration::from_secs_f64(self.time_budget_secs)),
            fixed: nlp.fixed_variables(),
            verbose: std::env::var_os("STRIDER_SOLVER_VERBOSE").is_some(),
            ..SolverOptions::default()
        }
    }
}

/// Contact timing of one reference step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub stance_foot: Foot,
    pub foothold: Vector3<f64>,
    pub onset_time: f64,
    pub duration: f64,
    /// Gait-cycle frequency implied by this step (one cycle = two steps).
    pub stepping_frequency: f64,
    /// Swing fraction of the cycle; 0.5 for the instant-transfer grounded run.
    pub swing_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceSample {
    pub time: f64,
    pub state: SrbmState,
    pub grf: Vector3<f64>,
    pub stance_foot: Foot,
    pub foothold: Vector3<f64>,
}

/// Time-sampled optimized turn: states, forces, footholds and gait parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub heading_speed: f64,
    pub yaw_target: f64,
    pub sample_rate: f64,
    pub total_duration: f64,
    pub samples: Vec<ReferenceSample>,
    pub phases: Vec<PhaseRecord>,
}

impl ReferenceTrajectory {
    /// Sample nearest to (at or before) time `t`, clamped to the series.
    pub fn sample_at(&self, t: f64) -> &ReferenceSample {
        let idx = ((t * self.sample_rate).floor() as usize).min(self.samples.len() - 1);
        &self.samples[idx]
    }

    /// Linearly interpolated reference state quantities at time `t`.
    pub fn interpolate(&self, t: f64) -> ReferenceSample {
        let pos = (t * self.sample_rate).max(0.0);
        let i = (pos.floor() as usize).min(self.samples.len() - 1);
        let j = (i + 1).min(self.samples.len() - 1);
        if i == j {
            return self.samples[i].clone();
        }
        let a = &self.samples[i];
        let b = &self.samples[j];
        let u = (pos - i as f64).clamp(0.0, 1.0);
        let q = a.state.q.slerp(&b.state.q, u);
        ReferenceSample {
            time: a.time + u * (b.time - a.time),
            state: SrbmState {
                p: a.state.p.lerp(&b.state.p, u),
                q,
                v: a.state.v.lerp(&b.state.v, u),
                w: a.state.w.lerp(&b.state.w, u),
            },
            grf: a.grf.lerp(&b.grf, u),
            stance_foot: if u < 0.5 { a.stance_foot } else { b.stance_foot },
            foothold: if u < 0.5 { a.foothold } else { b.foothold },
        }
    }

    /// Active phase index at maneuver time `t`.
    pub fn phase_at(&self, t: f64) -> usize {
        let mut acc = 0.0;
        for (i, ph) in self.phases.iter().enumerate() {
            acc += ph.duration;
            if t < acc {
                return i;
            }
        }
        self.phases.len() - 1
    }

    /// Touchdown times: each phase boundary including maneuver end.
    pub fn touchdown_times(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.phases.iter().map(|ph| {
            acc += ph.duration;
            acc
        }).collect()
    }
}

/// Per-speed outcome; failed solves keep their diagnostics instead of aborting
/// the rest of the library.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub speed: f64,
    pub converged: bool,
    pub max_violation: f64,
    pub stationarity: f64,
    pub outer_iterations: usize,
    pub trajectory: Option<ReferenceTrajectory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryLibrary {
    pub schema_version: u32,
    pub params: RigidBodyParams,
    pub limits: ConstraintLimits,
    pub body_height: f64,
    pub entries: Vec<LibraryEntry>,
}

impl TrajectoryLibrary {
    pub fn entry_for_speed(&self, speed: f64) -> Option<&ReferenceTrajectory> {
        self.entries
            .iter()
            .filter(|e| (e.speed - speed).abs() < 1e-9)
            .find_map(|e| e.trajectory.as_ref())
    }

    pub fn available_speeds(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.trajectory.is_some())
            .map(|e| e.speed)
            .collect()
    }

    pub fn top_speed(&self) -> Option<f64> {
        self.available_speeds().into_iter().fold(None, |acc, s| match acc {
            None => Some(s),
            Some(a) => Some(a.max(s)),
        })
    }
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("failed to pose NLP: {0}")]
    BadProblem(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at byte {offset} (line {line}, column {column}): {message}")]
    Parse { path: String, offset: usize, line: usize, column: usize, message: String },
    #[error("schema version {found} unsupported (expected {expected})")]
    SchemaMismatch { found: u32, expected: u32 },
}

/// Result of one turn solve, keeping the NLP for re-validation.
pub struct TurnSolve {
    pub nlp: TranscribedNlp,
    pub solution: Solution,
}

pub fn solve_turn(
    cfg: &TrajoptConfig,
    speed: f64,
    warm: Option<WarmStart>,
) -> Result<TurnSolve, LibraryError> {
    let nlp = TranscribedNlp::new(
        cfg.schedule(),
        cfg.params.clone(),
        BoundarySpec::turn(speed, cfg.body_height),
        cfg.limits.clone(),
    )
    .map_err(LibraryError::BadProblem)?;
    let opts = cfg.solver_options(&nlp);
    let warm = warm.unwrap_or_else(|| WarmStart::from_x(nlp.initial_guess()));
    let solution = nlp::solve(&nlp, &warm, &opts);
    Ok(TurnSolve { nlp, solution })
}

/// Resample a converged solution at the control rate.
pub fn extract_trajectory(nlp: &TranscribedNlp, x: &[f64], sample_rate: f64) -> ReferenceTrajectory {
    let l = &nlp.layout;
    let num_phases = l.num_phases();

    let mut phases = Vec::with_capacity(num_phases);
    let mut onset = 0.0;
    for (p, ph) in nlp.schedule.phases.iter().enumerate() {
        let d = x[l.duration(p)];
        let fi = l.foothold(p);
        phases.push(PhaseRecord {
            stance_foot: ph.stance_foot,
            foothold: Vector3::new(x[fi], x[fi + 1], x[fi + 2]),
            onset_time: onset,
            duration: d,
            stepping_frequency: 1.0 / (2.0 * d),
            swing_ratio: 0.5,
        });
        onset += d;
    }
    let total = onset;

    // Knot lookup: map global time to (phase, local interval, fraction).
    let state_at = |t: f64| -> (KnotState, Vector3<f64>, usize) {
        let t = t.clamp(0.0, total);
        let mut acc = 0.0;
        let mut phase = num_phases - 1;
        for (p, rec) in phases.iter().enumerate() {
            if t <= acc + rec.duration || p == num_phases - 1 {
                phase = p;
                break;
            }
            acc += rec.duration;
        }
        let rec = &phases[phase];
        let local = ((t - rec.onset_time) / rec.duration).clamp(0.0, 1.0);
        let segs = (l.knots(phase) - 1) as f64;
        let pos = local * segs;
        let k = (pos.floor() as usize).min(l.knots(phase) - 2);
        let u = pos - k as f64;

        let read = |k: usize| -> (KnotState, Vector3<f64>) {
            let si = l.state(phase, k);
            let gi = l.grf(phase, k);
            (
                KnotState::from_slice(&x[si..si + STATE_DIM]),
                Vector3::new(x[gi], x[gi + 1], x[gi + 2]),
            )
        };
        let (a, ga) = read(k);
        let (b, gb) = read(k + 1);
        let blend = KnotState {
            p: a.p.lerp(&b.p, u),
            q: a.q.lerp(&b.q, u),
            v: a.v.lerp(&b.v, u),
            w: a.w.lerp(&b.w, u),
        };
        (blend, ga.lerp(&gb, u), phase)
    };

    let mut samples = Vec::new();
    let mut i = 0usize;
    loop {
        let t = i as f64 / sample_rate;
        let t_clamped = t.min(total);
        let (ks, grf, phase) = state_at(t_clamped);
        let rec = &phases[phase];
        let q4 = Vector4::new(ks.q[0], ks.q[1], ks.q[2], ks.q[3]);
        let norm = q4.norm();
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q4 / norm));
        samples.push(ReferenceSample {
            time: t_clamped,
            state: SrbmState { p: ks.p, q, v: ks.v, w: ks.w },
            grf,
            stance_foot: rec.stance_foot,
            foothold: rec.foothold,
        });
        if t >= total {
            break;
        }
        i += 1;
    }

    ReferenceTrajectory {
        heading_speed: nlp.boundary.heading_speed,
        yaw_target: nlp.boundary.terminal_yaw,
        sample_rate,
        total_duration: total,
        samples,
        phases,
    }
}

/// Solve every speed (ascending), warm-starting each from the previous
/// converged solution. Failed speeds leave gaps instead of aborting.
pub fn generate_library(cfg: &TrajoptConfig, speeds: &[f64]) -> Result<TrajectoryLibrary, LibraryError> {
    let mut entries = Vec::with_capacity(speeds.len());
    let mut warm: Option<WarmStart> = None;
    for &speed in speeds {
        let solve = solve_turn(cfg, speed, warm.clone())?;
        let converged = solve.solution.status == SolveStatus::Converged;
        let trajectory = if converged {
            Some(extract_trajectory(&solve.nlp, &solve.solution.x, cfg.sample_rate))
        } else {
            None
        };
        if converged {
            warm = Some(WarmStart::from_solution(&solve.solution));
        }
        entries.push(LibraryEntry {
            speed,
            converged,
            max_violation: solve.solution.max_violation,
            stationarity: solve.solution.stationarity,
            outer_iterations: solve.solution.outer_iterations,
            trajectory,
        });
    }
    Ok(TrajectoryLibrary {
        schema_version: LIBRARY_SCHEMA_VERSION,
        params: cfg.params.clone(),
        limits: cfg.limits.clone(),
        body_height: cfg.body_height,
        entries,
    })
}

pub fn save_library(library: &TrajectoryLibrary, path: &Path) -> Result<(), LibraryError> {
    let text = serde_json::to_string_pretty(library).expect("library serializes");
    std::fs::write(path, text)
        .map_err(|source| LibraryError::Io { path: path.display().to_string(), source })
}

/// Outcome of loading: the library plus warnings about gaps.
pub struct LoadedLibrary {
    pub library: TrajectoryLibrary,
    pub warnings: Vec<String>,
}

pub fn load_library(path: &Path) -> Result<LoadedLibrary, LibraryError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| LibraryError::Io { path: path.display().to_string(), source })?;
    let library: TrajectoryLibrary = serde_json::from_str(&text).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        let offset = text
            .lines()
            .take(line.saturating_sub(1))
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + column.saturating_sub(1);
        LibraryError::Parse {
            path: path.display().to_string(),
            offset,
            line,
            column,
            message: e.to_string(),
        }
    })?;
    if library.schema_version != LIBRARY_SCHEMA_VERSION {
        return Err(LibraryError::SchemaMismatch {
            found: library.schema_version,
            expected: LIBRARY_SCHEMA_VERSION,
        });
    }
    let warnings: Vec<String> = library
        .entries
        .iter()
        .filter(|e| e.trajectory.is_none())
        .map(|e| {
            format!(
                "no trajectory for speed {:.2} m/s (converged={}, violation={:.2e})",
                e.speed, e.converged, e.max_violation
            )
        })
        .collect();
    Ok(LoadedLibrary { library, warnings })
}

/// Re-derive heading velocity targets used by the boundary conditions.
pub fn terminal_velocity(speed: f64, yaw_target: f64) -> Vector3<f64> {
    heading_velocity(speed, yaw_target)
}
