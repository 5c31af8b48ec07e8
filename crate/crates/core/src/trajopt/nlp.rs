//! Augmented-Lagrangian solver with an L-BFGS inner minimizer.
//!
//! Solves min f(x) s.t. c_eq(x) = 0, c_ineq(x) <= 0 for smooth problems with
//! analytic gradients. Equality and inequality constraints are folded into the
//! Powell-Hestenes-Rockafellar augmented Lagrangian; each outer iteration
//! minimizes it with L-BFGS, then updates multipliers or grows the penalty
//! depending on feasibility progress.

use std::time::{Duration, Instant};

/// A smooth constrained problem with analytic first derivatives.
///
/// Jacobians are only ever consumed as transpose-vector products, so
/// implementations accumulate `J_eq' * w_eq + J_ineq' * w_ineq` directly into a
/// gradient buffer instead of materializing sparse matrices.
pub trait ConstrainedProblem: Sync {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize {
        0
    }
    fn num_ineq(&self) -> usize {
        0
    }
    fn objective(&self, x: &[f64]) -> f64;
    /// Writes the objective gradient (overwrites `grad`).
    fn objective_gradient(&self, x: &[f64], grad: &mut [f64]);
    /// Writes equality residuals (target 0) and inequality residuals (target <= 0).
    fn constraints(&self, x: &[f64], eq: &mut [f64], ineq: &mut [f64]);
    /// Accumulates `J_eq(x)' * w_eq + J_ineq(x)' * w_ineq` into `grad`.
    fn add_weighted_jacobians(&self, x: &[f64], w_eq: &[f64], w_ineq: &[f64], grad: &mut [f64]);
    /// Physical constraint violation. Problems that scale rows internally
    /// override this so termination applies to unscaled residuals.
    fn violation_of(&self, eq: &[f64], ineq: &[f64]) -> f64 {
        let ve = eq.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        let vi = ineq.iter().fold(0.0f64, |a, g| a.max(*g));
        ve.max(vi.max(0.0))
    }
    /// Per-variable characteristic magnitudes for inner-solver preconditioning.
    fn variable_scaling(&self) -> Option<Vec<f64>> {
        None
    }
    /// Sparse Jacobian rows (column, value), duplicates allowed. Returns false
    /// when unsupported; the solver then falls back to L-BFGS inner solves.
    fn jacobian_rows(
        &self,
        _x: &[f64],
        _eq_rows: &mut [Vec<(u32, f64)>],
        _ineq_rows: &mut [Vec<(u32, f64)>],
    ) -> bool {
        false
    }
    /// Least-squares structure of the objective, as (weight, gradient row)
    /// pairs contributing `2 * weight * a a'` of curvature. Optional; improves
    /// Gauss-Newton step quality when the objective curvature is significant.
    fn objective_curvature_rows(&self, _x: &[f64], _out: &mut Vec<(f64, Vec<(u32, f64)>)>) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Maximum constraint violation of an accepted solution.
    pub tol_feasibility: f64,
    /// Maximum first-order stationarity (inf-norm of the Lagrangian gradient).
    pub tol_stationarity: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    pub max_outer: usize,
    /// L-BFGS iteration cap per outer iteration.
    pub max_inner: usize,
    /// Inner gradient tolerance at the first outer iteration; tightens toward
    /// `tol_stationarity` as feasibility improves.
    pub initial_inner_tol: f64,
    pub time_budget: Option<Duration>,
    /// Variables pinned to constant values (index, value).
    pub fixed: Vec<(usize, f64)>,
    /// Log one line per outer iteration to stderr.
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_feasibility: 1e-6,
            tol_stationarity: 1e-4,
            initial_penalty: 1000.0,
            penalty_growth: 10.0,
            max_penalty: 1e8,
            max_outer: 60,
            max_inner: 8000,
            initial_inner_tol: 1e-2,
            time_budget: None,
            fixed: Vec::new(),
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Outer-iteration or inner-iteration budget exhausted.
    IterationBudget,
    TimeBudget,
}

impl SolveStatus {
    pub fn is_converged(self) -> bool {
        matches!(self, SolveStatus::Converged)
    }
}

/// Best iterate plus convergence diagnostics; multipliers allow warm restarts.
#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    pub max_violation: f64,
    pub stationarity: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
}

/// Warm-start data: a decision vector and optional multiplier estimates.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub eq_multipliers: Option<Vec<f64>>,
    pub ineq_multipliers: Option<Vec<f64>>,
}

impl WarmStart {
    pub fn from_x(x: Vec<f64>) -> Self {
        Self { x, eq_multipliers: None, ineq_multipliers: None }
    }

    pub fn from_solution(sol: &Solution) -> Self {
        Self {
            x: sol.x.clone(),
            eq_multipliers: Some(sol.eq_multipliers.clone()),
            ineq_multipliers: Some(sol.ineq_multipliers.clone()),
        }
    }
}

struct AugmentedLagrangian<'a, P: ConstrainedProblem> {
    problem: &'a P,
    eq_mult: Vec<f64>,
    ineq_mult: Vec<f64>,
    penalty: f64,
    // scratch
    eq: Vec<f64>,
    ineq: Vec<f64>,
    w_eq: Vec<f64>,
    w_ineq: Vec<f64>,
}

impl<'a, P: ConstrainedProblem> AugmentedLagrangian<'a, P> {
    fn new(problem: &'a P, warm: &WarmStart, penalty: f64) -> Self {
        let m_eq = problem.num_eq();
        let m_in = problem.num_ineq();
        let eq_mult = warm
            .eq_multipliers
            .clone()
            .filter(|v| v.len() == m_eq)
            .unwrap_or_else(|| vec![0.0; m_eq]);
        let ineq_mult = warm
            .ineq_multipliers
            .clone()
            .filter(|v| v.len() == m_in)
            .unwrap_or_else(|| vec![0.0; m_in]);
        Self {
            problem,
            eq_mult,
            ineq_mult,
            penalty,
            eq: vec![0.0; m_eq],
            ineq: vec![0.0; m_in],
            w_eq: vec![0.0; m_eq],
            w_ineq: vec![0.0; m_in],
        }
    }

    /// AL value and gradient at `x`. The gradient equals the Lagrangian
    /// gradient evaluated at the first-order multiplier updates, which is also
    /// the stationarity measure used for termination.
    fn value_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        let rho = self.penalty;
        let mut val = self.problem.objective(x);
        self.problem.objective_gradient(x, grad);
        self.problem.constraints(x, &mut self.eq, &mut self.ineq);

        for i in 0..self.eq.len() {
            let c = self.eq[i];
            let lam = self.eq_mult[i];
            val += lam * c + 0.5 * rho * c * c;
            self.w_eq[i] = lam + rho * c;
        }
        for j in 0..self.ineq.len() {
            let g = self.ineq[j];
            let mu = self.ineq_mult[j];
            let t = mu + rho * g;
            if t > 0.0 {
                val += (t * t - mu * mu) / (2.0 * rho);
                self.w_ineq[j] = t;
            } else {
                val -= mu * mu / (2.0 * rho);
                self.w_ineq[j] = 0.0;
            }
        }
        self.problem.add_weighted_jacobians(x, &self.w_eq, &self.w_ineq, grad);
        val
    }

    /// AL value at `x` without gradient work (line-search probes).
    fn value_only(&mut self, x: &[f64]) -> f64 {
        let rho = self.penalty;
        let mut val = self.problem.objective(x);
        self.problem.constraints(x, &mut self.eq, &mut self.ineq);
        for i in 0..self.eq.len() {
            let c = self.eq[i];
            val += self.eq_mult[i] * c + 0.5 * rho * c * c;
        }
        for j in 0..self.ineq.len() {
            let g = self.ineq[j];
            let mu = self.ineq_mult[j];
            let t = mu + rho * g;
            if t > 0.0 {
                val += (t * t - mu * mu) / (2.0 * rho);
            } else {
                val -= mu * mu / (2.0 * rho);
            }
        }
        val
    }

    /// Progress measure including complementarity for inequalities.
    fn progress_measure(&self) -> f64 {
        let rho = self.penalty;
        let ve = self.eq.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        let vi = self
            .ineq
            .iter()
            .zip(&self.ineq_mult)
            .fold(0.0f64, |a, (g, mu)| a.max(g.max(-mu / rho).abs()));
        ve.max(vi)
    }

    fn update_multipliers(&mut self) {
        let rho = self.penalty;
        for (lam, c) in self.eq_mult.iter_mut().zip(&self.eq) {
            *lam += rho * c;
        }
        for (mu, g) in self.ineq_mult.iter_mut().zip(&self.ineq) {
            *mu = (*mu + rho * g).max(0.0);
        }
    }
}

/// Minimize a smooth constrained problem starting from `warm`.
///
/// Never panics on a bad run: budget exhaustion returns the best iterate with
/// an explicit non-converged status.
pub fn solve<P: ConstrainedProblem>(problem: &P, warm: &WarmStart, opts: &SolverOptions) -> Solution {
    let n = problem.num_vars();
    assert_eq!(warm.x.len(), n, "warm start dimension mismatch");
    let start_time = Instant::now();

    let scale = problem.variable_scaling().unwrap_or_else(|| vec![1.0; n]);
    assert_eq!(scale.len(), n);

    // The inner solver works on y = x / scale; master copies stay in x-space.
    let mut x: Vec<f64> = warm.x.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
    for &(idx, val) in &opts.fixed {
        x[idx] = val;
    }
    let mut y: Vec<f64> = x.iter().zip(&scale).map(|(v, s)| v / s).collect();
    let free_mask: Vec<bool> = {
        let mut mask = vec![true; n];
        for &(idx, _) in &opts.fixed {
            mask[idx] = false;
        }
        mask
    };

    let mut al = AugmentedLagrangian::new(problem, warm, opts.initial_penalty);
    let mut gn_ws = {
        let mut probe = GaussNewtonWorkspace::new(n, problem.num_eq(), problem.num_ineq());
        if problem.jacobian_rows(&x, &mut probe.eq_rows, &mut probe.ineq_rows) {
            Some(probe)
        } else {
            None
        }
    };
    let mut inner_tol = opts.initial_inner_tol.max(opts.tol_stationarity);
    let mut total_inner = 0usize;
    let mut progress_prev = f64::INFINITY;

    let mut best: Option<(f64, Vec<f64>, f64, f64)> = None; // (viol, x, obj, stat)
    let mut status = SolveStatus::IterationBudget;
    let mut outer_done = 0usize;
    let mut stalled_rounds = 0usize;
    let mut dead_rounds = 0usize;

    let mut x_buf = vec![0.0; n];
    for outer in 0..opts.max_outer {
        outer_done = outer + 1;
        let budget_left = opts
            .time_budget
            .map(|b| b.saturating_sub(start_time.elapsed()))
            .unwrap_or(Duration::MAX);
        if budget_left.is_zero() {
            status = SolveStatus::TimeBudget;
            break;
        }

        let inner = if let Some(ws) = gn_ws.as_mut() {
            let cap = ws.round_cap;
            let r = gauss_newton_inner(
                &mut al,
                ws,
                &mut x,
                &scale,
                &free_mask,
                inner_tol,
                opts.max_inner.min(cap),
                budget_left,
            );
            for i in 0..n {
                y[i] = x[i] / scale[i];
            }
            r
        } else {
            let scale_ref = &scale;
            let x_buf = &mut x_buf;
            let r = lbfgs(
                &mut |y: &[f64], grad: &mut [f64]| {
                    for i in 0..y.len() {
                        x_buf[i] = y[i] * scale_ref[i];
                    }
                    let v = al.value_grad(x_buf, grad);
                    for (g, s) in grad.iter_mut().zip(scale_ref) {
                        *g *= s;
                    }
                    v
                },
                &mut y,
                &free_mask,
                inner_tol,
                opts.max_inner,
                budget_left,
            );
            for i in 0..n {
                x[i] = y[i] * scale[i];
            }
            r
        };
        total_inner += inner.iterations;

        // Evaluate convergence at the inner solution; stationarity is the
        // inf-norm of the Lagrangian gradient in natural problem units.
        let mut grad = vec![0.0; n];
        let _ = al.value_grad(&x, &mut grad);
        let stationarity = grad
            .iter()
            .zip(&free_mask)
            .filter(|(_, free)| **free)
            .fold(0.0f64, |a, (g, _)| a.max(g.abs()));
        let violation = problem.violation_of(&al.eq, &al.ineq);
        let objective = problem.objective(&x);

        let better = match &best {
            None => true,
            Some((bv, _, _, bs)) => {
                let was_feasible = *bv <= opts.tol_feasibility;
                let is_feasible = violation <= opts.tol_feasibility;
                match (was_feasible, is_feasible) {
                    (true, true) => stationarity < *bs,
                    (false, true) => true,
                    (true, false) => false,
                    (false, false) => violation < *bv,
                }
            }
        };
        if better {
            best = Some((violation, x.clone(), objective, stationarity));
        }

        if opts.verbose {
            eprintln!(
                "  outer {outer:>3}: viol {violation:9.3e} stat {stationarity:9.3e} rho {:9.3e} inner {:>5} obj {objective:10.4e}",
                al.penalty, inner.iterations
            );
        }

        if violation <= opts.tol_feasibility && stationarity <= opts.tol_stationarity {
            status = SolveStatus::Converged;
            break;
        }

        if violation <= opts.tol_feasibility && gn_ws.is_some() {
            let ws = gn_ws.as_mut().unwrap();
            if let Some((stat_ls, eq_mult, ineq_mult)) =
                least_squares_stationarity(&al, ws, &x, &free_mask)
            {
                if opts.verbose {
                    eprintln!("  outer {outer:>3}: least-squares stationarity {stat_ls:9.3e}");
                }
                if stat_ls <= opts.tol_stationarity {
                    al.eq_mult = eq_mult;
                    al.ineq_mult = ineq_mult;
                    best = Some((violation, x.clone(), objective, stat_ls));
                    status = SolveStatus::Converged;
                    break;
                }
            }
        }

        if inner.hit_time_budget {
            status = SolveStatus::TimeBudget;
            break;
        }

        // A subproblem that exhausted its iteration budget without meeting
        // the gradient tolerance is resumed rather than perturbed: multiplier
        // updates computed from an unconverged iterate inject noise. The
        // Gauss-Newton path solves its subproblems reliably, so only the
        // L-BFGS fallback needs the extra rounds.
        let stall_cap = if gn_ws.is_some() { 1 } else { 4 };
        if !inner.converged && inner.iterations <= 1 {
            // The model cannot produce a productive step at any damping:
            // further multiplier updates on a pinned iterate only drift.
            dead_rounds += 1;
            if dead_rounds >= 6 {
                break;
            }
        } else {
            dead_rounds = 0;
        }
        if !inner.converged && inner.iterations > 1 && stalled_rounds < stall_cap {
            stalled_rounds += 1;
            continue;
        }
        stalled_rounds = 0;

        if violation <= opts.tol_feasibility {
            // Feasible but not yet stationary. While the inner solver still
            // moves, keep polishing the unchanged subproblem; once it cannot
            // (steps below float resolution at high penalty), take a dual
            // step so the next subproblem is freshly conditioned.
            inner_tol = opts.tol_stationarity;
            if let Some(ws) = gn_ws.as_mut() {
                ws.round_cap = 800;
            }
            if inner.iterations <= 1 {
                al.update_multipliers();
            }
            continue;
        }

        let progress = al.progress_measure();
        if progress <= 0.5 * progress_prev || progress <= opts.tol_feasibility {
            al.update_multipliers();
            progress_prev = progress;
        } else {
            al.penalty = (al.penalty * opts.penalty_growth).min(opts.max_penalty);
            // Multipliers still improve from the latest residuals.
            al.update_multipliers();
        }
        inner_tol = (inner_tol * 0.3).max(opts.tol_stationarity);
    }

    let (final_violation, final_x, final_obj, final_stat) =
        best.unwrap_or((f64::INFINITY, x.clone(), problem.objective(&x), f64::INFINITY));

    Solution {
        x: final_x,
        status,
        objective: final_obj,
        max_violation: final_violation,
        stationarity: final_stat,
        outer_iterations: outer_done,
        inner_iterations: total_inner,
        eq_multipliers: al.eq_mult,
        ineq_multipliers: al.ineq_mult,
    }
}

/// Gauss-Newton inner minimizer for AL subproblems with sparse Jacobians.
///
/// Builds the penalty Hessian rho * J' J over active rows in the scaled
/// variable space, applies Levenberg-Marquardt damping, and backtracks on the
/// AL value. Quadratic local convergence where L-BFGS stalls.
struct GaussNewtonWorkspace {
    eq_rows: Vec<Vec<(u32, f64)>>,
    ineq_rows: Vec<Vec<(u32, f64)>>,
    obj_rows: Vec<(f64, Vec<(u32, f64)>)>,
    hessian: nalgebra::DMatrix<f64>,
    scratch_vals: Vec<f64>,
    scratch_cols: Vec<usize>,
    damping: f64,
    /// Iteration cap for the current outer round.
    round_cap: usize,
}

impl GaussNewtonWorkspace {
    fn new(n: usize, m_eq: usize, m_ineq: usize) -> Self {
        Self {
            eq_rows: vec![Vec::new(); m_eq],
            ineq_rows: vec![Vec::new(); m_ineq],
            obj_rows: Vec::new(),
            hessian: nalgebra::DMatrix::zeros(n, n),
            scratch_vals: vec![0.0; n],
            scratch_cols: Vec::with_capacity(64),
            damping: 1e-6,
            round_cap: 200,
        }
    }
}

/// Least-squares multiplier estimate at a feasible point: the multipliers
/// minimizing |grad f + J' lambda| over the active rows. This is the sharp
/// KKT dual-infeasibility measure; first-order AL estimates converge to it
/// slowly, so the endgame queries it directly.
fn least_squares_stationarity<P: ConstrainedProblem>(
    al: &AugmentedLagrangian<'_, P>,
    ws: &mut GaussNewtonWorkspace,
    x: &[f64],
    free_mask: &[bool],
) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let problem = al.problem;
    let n = problem.num_vars();
    if !problem.jacobian_rows(x, &mut ws.eq_rows, &mut ws.ineq_rows) {
        return None;
    }
    let mut grad_f = vec![0.0; n];
    problem.objective_gradient(x, &mut grad_f);
    for (g, free) in grad_f.iter_mut().zip(free_mask) {
        if !*free {
            *g = 0.0;
        }
    }

    // Active set: all equalities plus inequalities with positive AL weight.
    let active_ineq: Vec<usize> =
        (0..ws.ineq_rows.len()).filter(|&j| al.w_ineq[j] > 0.0).collect();
    let m = ws.eq_rows.len() + active_ineq.len();
    if m == 0 {
        let stat = grad_f.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        return Some((stat, Vec::new(), vec![0.0; ws.ineq_rows.len()]));
    }

    let mut basis = nalgebra::DMatrix::<f64>::zeros(m, n);
    let mut fill = |r: usize, entries: &[(u32, f64)]| {
        for &(c, v) in entries {
            let c = c as usize;
            if free_mask[c] {
                basis[(r, c)] += v;
            }
        }
    };
    for (r, row) in ws.eq_rows.iter().enumerate() {
        fill(r, row);
    }
    for (i, &j) in active_ineq.iter().enumerate() {
        fill(ws.eq_rows.len() + i, &ws.ineq_rows[j]);
    }

    let grad_vec = nalgebra::DVector::from_column_slice(&grad_f);
    let mut lambda = {
        let mut normal = &basis * basis.transpose();
        for i in 0..m {
            normal[(i, i)] += 1e-10;
        }
        let rhs = -(&basis * &grad_vec);
        normal.cholesky()?.solve(&rhs)
    };
    // Inequality multipliers must stay non-negative; clamp and accept the
    // slightly suboptimal residual rather than iterating an active set.
    for i in 0..active_ineq.len() {
        let v = lambda[ws.eq_rows.len() + i];
        if v < 0.0 {
            lambda[ws.eq_rows.len() + i] = 0.0;
        }
    }
    let residual = grad_vec + basis.transpose() * &lambda;
    let stat = residual
        .iter()
        .zip(free_mask)
        .filter(|(_, free)| **free)
        .fold(0.0f64, |a, (r, _)| a.max(r.abs()));

    let eq_mult = lambda.as_slice()[..ws.eq_rows.len()].to_vec();
    let mut ineq_mult = vec![0.0; ws.ineq_rows.len()];
    for (i, &j) in active_ineq.iter().enumerate() {
        ineq_mult[j] = lambda[ws.eq_rows.len() + i];
    }
    Some((stat, eq_mult, ineq_mult))
}

#[allow(clippy::too_many_arguments)]
fn gauss_newton_inner<P: ConstrainedProblem>(
    al: &mut AugmentedLagrangian<'_, P>,
    ws: &mut GaussNewtonWorkspace,
    x: &mut [f64],
    scale: &[f64],
    free_mask: &[bool],
    grad_tol: f64,
    max_iters: usize,
    time_budget: Duration,
) -> InnerResult {
    let n = x.len();
    let start = Instant::now();
    let mut grad = vec![0.0; n];
    let mut g_y = vec![0.0; n];
    let mut x_trial = vec![0.0; n];
    // A previous round may have escalated damping to its ceiling; start fresh
    // enough that genuine steps are possible again.
    ws.damping = ws.damping.clamp(1e-8, 1e3);

    for iter in 0..max_iters {
        if start.elapsed() >= time_budget {
            return InnerResult { iterations: iter, hit_time_budget: true, converged: false };
        }
        let f0 = al.value_grad(x, &mut grad);
        let mut gnorm = 0.0f64;
        for i in 0..n {
            g_y[i] = if free_mask[i] { grad[i] * scale[i] } else { 0.0 };
            gnorm = gnorm.max(g_y[i].abs());
        }
        if gnorm <= grad_tol {
            return InnerResult { iterations: iter, hit_time_budget: false, converged: true };
        }

        if !al.problem.jacobian_rows(x, &mut ws.eq_rows, &mut ws.ineq_rows) {
            return InnerResult { iterations: iter, hit_time_budget: false, converged: false };
        }

        // Assemble H = rho * sum over active rows of a a' in scaled space.
        let rho = al.penalty;
        ws.hessian.fill(0.0);
        {
            let hess = &mut ws.hessian;
            let vals = &mut ws.scratch_vals;
            let cols = &mut ws.scratch_cols;
            let mut add_row = |entries: &[(u32, f64)]| {
                cols.clear();
                for &(c, v) in entries {
                    let c = c as usize;
                    if !free_mask[c] {
                        continue;
                    }
                    if vals[c] == 0.0 {
                        cols.push(c);
                    }
                    vals[c] += v * scale[c];
                }
                for ai in 0..cols.len() {
                    let ci = cols[ai];
                    let vi = vals[ci];
                    for aj in ai..cols.len() {
                        let cj = cols[aj];
                        let vj = vals[cj];
                        let (r, c) = if ci <= cj { (ci, cj) } else { (cj, ci) };
                        hess[(r, c)] += rho * vi * vj;
                    }
                }
                for &c in cols.iter() {
                    vals[c] = 0.0;
                }
            };
            for row in ws.eq_rows.iter() {
                add_row(row);
            }
            for (j, row) in ws.ineq_rows.iter().enumerate() {
                if al.w_ineq[j] > 0.0 {
                    add_row(row);
                }
            }
        }
        if al.problem.objective_curvature_rows(x, &mut ws.obj_rows) {
            let hess = &mut ws.hessian;
            for (weight, row) in ws.obj_rows.iter() {
                // 2 w a a' in scaled space, upper triangle.
                for (ai, &(ci, vi)) in row.iter().enumerate() {
                    let ci = ci as usize;
                    if !free_mask[ci] {
                        continue;
                    }
                    let vi = vi * scale[ci];
                    for &(cj, vj) in &row[ai..] {
                        let cj = cj as usize;
                        if !free_mask[cj] {
                            continue;
                        }
                        let vj = vj * scale[cj];
                        let (r, c) = if ci <= cj { (ci, cj) } else { (cj, ci) };
                        hess[(r, c)] += 2.0 * weight * vi * vj;
                    }
                }
            }
        }
        // Mirror to the lower triangle and pin fixed variables.
        for r in 0..n {
            for c in 0..r {
                ws.hessian[(r, c)] = ws.hessian[(c, r)];
            }
        }
        for i in 0..n {
            if !free_mask[i] {
                for j in 0..n {
                    ws.hessian[(i, j)] = 0.0;
                    ws.hessian[(j, i)] = 0.0;
                }
                ws.hessian[(i, i)] = 1.0;
            }
        }

        // Levenberg-Marquardt step control: solve with the current damping,
        // accept or reject the full step, and adapt damping accordingly. The
        // active-set Gauss-Newton matrix is rank-deficient (fewer active rows
        // than variables), so the damping floor also bounds nullspace motion.
        let mut accepted = false;
        for _attempt in 0..24 {
            let mut damped = ws.hessian.clone();
            for i in 0..n {
                damped[(i, i)] += ws.damping;
            }
            let Some(chol) = damped.cholesky() else {
                ws.damping *= 10.0;
                continue;
            };
            let rhs = nalgebra::DVector::from_iterator(n, g_y.iter().map(|g| -g));
            let d = chol.solve(&rhs);
            let dg: f64 = d.iter().zip(&g_y).map(|(a, b)| a * b).sum();
            if dg >= 0.0 {
                ws.damping *= 10.0;
                continue;
            }
            for i in 0..n {
                x_trial[i] = x[i] + d[i] * scale[i];
            }
            let f_trial = al.value_only(&x_trial);
            // Predicted decrease of the damped quadratic model: -0.5 d'g.
            let predicted = -0.5 * dg;
            if f_trial.is_finite() && f_trial < f0 {
                x.copy_from_slice(&x_trial);
                let ratio = (f0 - f_trial) / predicted.max(1e-300);
                if ratio > 0.5 {
                    ws.damping = (ws.damping * 0.3).max(1e-8);
                } else if ratio < 0.05 {
                    ws.damping *= 3.0;
                }
                accepted = true;
                break;
            }
            ws.damping *= 10.0;
            if ws.damping > 1e16 {
                break;
            }
        }
        if std::env::var_os("STRIDER_GN_TRACE").is_some() && iter < 15 {
            eprintln!(
                "    gn iter {iter}: f0 {f0:.6e} gnorm {gnorm:.3e} damping {:.3e} accepted {accepted}",
                ws.damping
            );
        }
        if !accepted {
            // No productive step at any damping: stationary for this model.
            return InnerResult { iterations: iter + 1, hit_time_budget: false, converged: false };
        }
    }
    InnerResult { iterations: max_iters, hit_time_budget: false, converged: false }
}

struct InnerResult {
    iterations: usize,
    hit_time_budget: bool,
    /// Exited because the gradient tolerance was met.
    converged: bool,
}

/// L-BFGS with strong-Wolfe line search. `free_mask` pins fixed variables by
/// zeroing their gradient entries, so search directions never move them.
fn lbfgs<F>(
    value_grad: &mut F,
    x: &mut [f64],
    free_mask: &[bool],
    grad_tol: f64,
    max_iters: usize,
    time_budget: Duration,
) -> InnerResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    const MEMORY: usize = 12;
    let n = x.len();
    let start = Instant::now();

    let mask = |g: &mut [f64]| {
        for (gi, free) in g.iter_mut().zip(free_mask) {
            if !free {
                *gi = 0.0;
            }
        }
    };

    let mut grad = vec![0.0; n];
    let mut f = value_grad(x, &mut grad);
    mask(&mut grad);

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut dir = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut grad_new = vec![0.0; n];

    for iter in 0..max_iters {
        let gnorm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gnorm <= grad_tol {
            return InnerResult { iterations: iter, hit_time_budget: false, converged: true };
        }
        if start.elapsed() >= time_budget {
            return InnerResult { iterations: iter, hit_time_budget: true, converged: false };
        }

        // Two-loop recursion for dir = -H * grad.
        dir.copy_from_slice(&grad);
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let a = rho_hist[i] * dot(&s_hist[i], &dir);
            alpha[i] = a;
            axpy(-a, &y_hist[i], &mut dir);
        }
        if k > 0 {
            let last = k - 1;
            let ys = 1.0 / rho_hist[last];
            let yy = dot(&y_hist[last], &y_hist[last]);
            if yy > 0.0 {
                let scale = ys / yy;
                for d in dir.iter_mut() {
                    *d *= scale;
                }
            }
        }
        for i in 0..k {
            let b = rho_hist[i] * dot(&y_hist[i], &dir);
            axpy(alpha[i] - b, &s_hist[i], &mut dir);
        }
        for d in dir.iter_mut() {
            *d = -*d;
        }

        let mut dg = dot(&dir, &grad);
        if dg >= 0.0 {
            // Not a descent direction; reset to steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            for (d, g) in dir.iter_mut().zip(&grad) {
                *d = -g;
            }
            dg = -dot(&grad, &grad);
            if dg == 0.0 {
                return InnerResult { iterations: iter, hit_time_budget: false, converged: true };
            }
        }

        let alpha0 = if k == 0 { (1.0 / gnorm.max(1.0)).min(1.0) } else { 1.0 };
        let ls = wolfe_search(value_grad, x, &dir, f, dg, alpha0, free_mask, &mut x_new, &mut grad_new);
        let Some((step, f_new)) = ls else {
            // Line search failed; gradient may be at numerical noise level.
            return InnerResult { iterations: iter, hit_time_budget: false, converged: true };
        };
        let _ = step;

        let mut s = vec![0.0; n];
        let mut y = vec![0.0; n];
        for i in 0..n {
            s[i] = x_new[i] - x[i];
            y[i] = grad_new[i] - grad[i];
        }
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).max(1e-300) {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(y);
        }

        x.copy_from_slice(&x_new);
        grad.copy_from_slice(&grad_new);
        f = f_new;
    }
    InnerResult { iterations: max_iters, hit_time_budget: false, converged: false }
}

/// Strong-Wolfe bracketing line search (bracket + zoom). Returns (alpha, f).
/// Gradients are masked so fixed variables do not pollute curvature estimates.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    value_grad: &mut F,
    x: &[f64],
    dir: &[f64],
    f0: f64,
    dg0: f64,
    alpha0: f64,
    free_mask: &[bool],
    x_out: &mut [f64],
    grad_out: &mut [f64],
) -> Option<(f64, f64)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    const MAX_EVALS: usize = 40;

    let mask = |g: &mut [f64]| {
        for (gi, free) in g.iter_mut().zip(free_mask) {
            if !free {
                *gi = 0.0;
            }
        }
    };
    let mut eval = |alpha: f64, x_out: &mut [f64], grad_out: &mut [f64]| -> (f64, f64) {
        for i in 0..x.len() {
            x_out[i] = x[i] + alpha * dir[i];
        }
        let f = value_grad(x_out, grad_out);
        mask(grad_out);
        (f, dot(grad_out, dir))
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut dg_prev = dg0;
    let mut alpha = alpha0;
    let mut evals = 0;

    // Bracketing phase: find [lo, hi] containing a strong-Wolfe point.
    let (mut lo, mut f_lo, mut dg_lo, mut hi, mut f_hi) = loop {
        let (f_a, dg_a) = eval(alpha, x_out, grad_out);
        evals += 1;
        if f_a > f0 + C1 * alpha * dg0 || (evals > 1 && f_a >= f_prev) {
            break (alpha_prev, f_prev, dg_prev, alpha, f_a);
        }
        if dg_a.abs() <= -C2 * dg0 {
            return Some((alpha, f_a));
        }
        if dg_a >= 0.0 {
            break (alpha, f_a, dg_a, alpha_prev, f_prev);
        }
        if evals >= MAX_EVALS {
            return if f_a < f0 { Some((alpha, f_a)) } else { None };
        }
        alpha_prev = alpha;
        f_prev = f_a;
        dg_prev = dg_a;
        alpha *= 2.0;
        if alpha > 1e10 {
            return None;
        }
    };

    // Zoom phase: quadratic interpolation through (lo, f_lo, dg_lo) and
    // (hi, f_hi), safeguarded toward bisection.
    for _ in evals..MAX_EVALS {
        let d = hi - lo;
        let mut alpha_j = lo + 0.5 * d;
        let denom = 2.0 * (f_hi - f_lo - dg_lo * d);
        if denom.abs() > 1e-300 {
            let trial = lo - dg_lo * d * d / denom;
            let (lo_guard, hi_guard) = (lo + 0.05 * d, lo + 0.95 * d);
            if trial.is_finite() && (trial - lo_guard) * (trial - hi_guard) < 0.0 {
                alpha_j = trial;
            }
        }
        let (f_j, dg_j) = eval(alpha_j, x_out, grad_out);
        if f_j > f0 + C1 * alpha_j * dg0 || f_j >= f_lo {
            hi = alpha_j;
            f_hi = f_j;
        } else {
            if dg_j.abs() <= -C2 * dg0 {
                return Some((alpha_j, f_j));
            }
            if dg_j * (hi - lo) >= 0.0 {
                hi = lo;
                f_hi = f_lo;
            }
            lo = alpha_j;
            f_lo = f_j;
            dg_lo = dg_j;
        }
        if (hi - lo).abs() <= 1e-14 * lo.abs().max(1.0) {
            break;
        }
    }
    // Fall back to the best sufficient-decrease point found.
    let (f_l, _) = eval(lo, x_out, grad_out);
    if lo > 0.0 && f_l < f0 {
        Some((lo, f_l))
    } else {
        None
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Central finite-difference gradient of `f`, for verifying analytic gradients.
pub fn finite_difference_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let step = h * (1.0 + x[i].abs());
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl ConstrainedProblem for Rosenbrock {
        fn num_vars(&self) -> usize {
            2
        }
        fn objective(&self, x: &[f64]) -> f64 {
            let (a, b) = (x[0], x[1]);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        }
        fn objective_gradient(&self, x: &[f64], grad: &mut [f64]) {
            let (a, b) = (x[0], x[1]);
            grad[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            grad[1] = 200.0 * (b - a * a);
        }
        fn constraints(&self, _x: &[f64], _eq: &mut [f64], _ineq: &mut [f64]) {}
        fn add_weighted_jacobians(&self, _x: &[f64], _w: &[f64], _wi: &[f64], _g: &mut [f64]) {}
    }

    #[test]
    fn rosenbrock_unconstrained() {
        let opts = SolverOptions { tol_stationarity: 1e-8, ..SolverOptions::default() };
        let sol = solve(&Rosenbrock, &WarmStart::from_x(vec![-1.2, 1.0]), &opts);
        assert!(sol.status.is_converged());
        assert!((sol.x[0] - 1.0).abs() < 1e-5 && (sol.x[1] - 1.0).abs() < 1e-5);
    }

    /// min x^2 + y^2 s.t. x + y = 1 -> (0.5, 0.5).
    struct EqualityQp;

    impl ConstrainedProblem for EqualityQp {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x[0] * x[0] + x[1] * x[1]
        }
        fn objective_gradient(&self, x: &[f64], grad: &mut [f64]) {
            grad[0] = 2.0 * x[0];
            grad[1] = 2.0 * x[1];
        }
        fn constraints(&self, x: &[f64], eq: &mut [f64], _ineq: &mut [f64]) {
            eq[0] = x[0] + x[1] - 1.0;
        }
        fn add_weighted_jacobians(&self, _x: &[f64], w_eq: &[f64], _wi: &[f64], grad: &mut [f64]) {
            grad[0] += w_eq[0];
            grad[1] += w_eq[0];
        }
    }

    #[test]
    fn equality_constrained_qp() {
        let sol = solve(&EqualityQp, &WarmStart::from_x(vec![3.0, -2.0]), &SolverOptions::default());
        assert!(sol.status.is_converged());
        assert!((sol.x[0] - 0.5).abs() < 1e-6 && (sol.x[1] - 0.5).abs() < 1e-6);
        assert!(sol.max_violation <= 1e-6);
        // KKT multiplier for this problem is -1.
        assert!((sol.eq_multipliers[0] + 1.0).abs() < 1e-3);
    }

    /// min (x+1)^2 + y^2 s.t. x >= 1 (active) -> (1, 0).
    struct InequalityQp;

    impl ConstrainedProblem for InequalityQp {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_ineq(&self) -> usize {
            1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            (x[0] + 1.0).powi(2) + x[1] * x[1]
        }
        fn objective_gradient(&self, x: &[f64], grad: &mut [f64]) {
            grad[0] = 2.0 * (x[0] + 1.0);
            grad[1] = 2.0 * x[1];
        }
        fn constraints(&self, x: &[f64], _eq: &mut [f64], ineq: &mut [f64]) {
            ineq[0] = 1.0 - x[0];
        }
        fn add_weighted_jacobians(&self, _x: &[f64], _we: &[f64], w_ineq: &[f64], grad: &mut [f64]) {
            grad[0] -= w_ineq[0];
        }
    }

    #[test]
    fn inequality_constrained_qp() {
        let opts = SolverOptions { tol_stationarity: 1e-9, ..SolverOptions::default() };
        let sol = solve(&InequalityQp, &WarmStart::from_x(vec![5.0, 3.0]), &opts);
        assert!(sol.status.is_converged());
        assert!((sol.x[0] - 1.0).abs() < 1e-6 && sol.x[1].abs() < 1e-6);
    }

    #[test]
    fn fixed_variables_never_move() {
        let opts = SolverOptions { fixed: vec![(1, 0.25)], ..SolverOptions::default() };
        let sol = solve(&Rosenbrock, &WarmStart::from_x(vec![-1.2, 1.0]), &opts);
        assert_eq!(sol.x[1], 0.25);
        // Optimal x for fixed y: minimize (1-x)^2 + 100 (0.25 - x^2)^2.
        let f = |x: f64| (1.0 - x).powi(2) + 100.0 * (0.25 - x * x).powi(2);
        let better = (sol.x[0] - 1e-4, sol.x[0] + 1e-4);
        assert!(f(sol.x[0]) <= f(better.0) && f(sol.x[0]) <= f(better.1));
    }

    #[test]
    fn warm_start_reconverges_quickly() {
        let opts = SolverOptions::default();
        let first = solve(&EqualityQp, &WarmStart::from_x(vec![3.0, -2.0]), &opts);
        assert!(first.status.is_converged());
        let second = solve(&EqualityQp, &WarmStart::from_solution(&first), &opts);
        assert!(second.status.is_converged());
        assert!(second.outer_iterations <= 3, "outer = {}", second.outer_iterations);
    }

    #[test]
    fn finite_difference_matches_rosenbrock() {
        let x = vec![0.3, -0.7];
        let mut grad = vec![0.0; 2];
        Rosenbrock.objective_gradient(&x, &mut grad);
        let fd = finite_difference_gradient(&|x| Rosenbrock.objective(x), &x, 1e-6);
        for i in 0..2 {
            assert!((grad[i] - fd[i]).abs() / fd[i].abs().max(1.0) < 1e-7);
        }
    }
}
