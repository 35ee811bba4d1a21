//! Solver-agnostic convex QCQP intermediate representation and the backend
//! adapter contract.
//!
//! The IR keeps convex quadratic constraints as quadratic rows; lowering to
//! second-order cones is the adapter's job when its backend wants cones.
//! Every reported optimum is re-checked against the IR independently of the
//! backend before it is accepted.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::restriction::{RestrictionProgram, Row};

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("constraint '{row}' has a non-PSD quadratic (eigenvalue {eigenvalue:.3e})")]
    NonPsdQuadratic { row: String, eigenvalue: f64 },
    #[error("non-finite data in {what}")]
    NonFinite { what: String },
    #[error("variable index {index} out of range ({total} variables)")]
    IndexOutOfRange { index: usize, total: usize },
    #[error("no solver backend attached")]
    BackendMissing,
    #[error("backend error: {0}")]
    Backend(String),
}

/// Convergence tolerances handed to the backend.
#[derive(Debug, Clone, Serialize)]
pub struct SolverTolerances {
    pub feasibility: f64,
    pub gap_abs: f64,
    pub gap_rel: f64,
    pub max_iterations: usize,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        Self { feasibility: 1e-8, gap_abs: 1e-8, gap_rel: 1e-8, max_iterations: 200 }
    }
}

/// A sparse linear row `aᵀv (≤ or =) rhs`.
#[derive(Debug, Clone)]
pub struct SparseRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
    pub name: String,
}

/// A convex quadratic row `½vᵀPv + aᵀv ≤ rhs`. Quadratic entries follow the
/// crate convention: `(i, i, v)` contributes ½vηᵢ², `(i, j, v)` with i ≠ j
/// contributes vηᵢηⱼ.
#[derive(Debug, Clone)]
pub struct QuadRow {
    pub quad: Vec<(usize, usize, f64)>,
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
    pub name: String,
}

/// The canonicalized program: minimize/maximize ½vᵀP₀v + a₀ᵀv subject to
/// equalities, inequalities, quadratic rows, and variable bounds.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub num_vars: usize,
    pub minimize: bool,
    pub objective_quad: Vec<(usize, usize, f64)>,
    pub objective_linear: Vec<(usize, f64)>,
    pub equalities: Vec<SparseRow>,
    pub inequalities: Vec<SparseRow>,
    pub quadratics: Vec<QuadRow>,
    /// Per-variable (lower, upper), ±∞ when free.
    pub bounds: Vec<(f64, f64)>,
    pub var_names: Vec<String>,
}

impl ConicProgram {
    pub fn constraint_count(&self) -> usize {
        self.equalities.len() + self.quadratics.len() + self.inequalities.len()
    }
}

pub fn eval_linear(terms: &[(usize, f64)], x: &[f64]) -> f64 {
    terms.iter().map(|(i, v)| v * x[*i]).sum()
}

pub fn eval_quad(quad: &[(usize, usize, f64)], x: &[f64]) -> f64 {
    quad.iter()
        .map(|(i, j, v)| if i == j { 0.5 * v * x[*i] * x[*i] } else { v * x[*i] * x[*j] })
        .sum()
}

fn check_finite_terms(name: &str, terms: &[(usize, f64)], total: usize) -> Result<(), ConicError> {
    for (i, v) in terms {
        if *i >= total {
            return Err(ConicError::IndexOutOfRange { index: *i, total });
        }
        if !v.is_finite() {
            return Err(ConicError::NonFinite { what: name.to_string() });
        }
    }
    Ok(())
}

/// Dense PSD check of a quadratic row over its support variables.
fn check_psd_quad(name: &str, quad: &[(usize, usize, f64)]) -> Result<(), ConicError> {
    if quad.is_empty() {
        return Ok(());
    }
    let mut support: Vec<usize> = quad.iter().flat_map(|(i, j, _)| [*i, *j]).collect();
    support.sort_unstable();
    support.dedup();
    let pos = |id: usize| support.binary_search(&id).unwrap();
    let d = support.len();
    let mut p = DMatrix::<f64>::zeros(d, d);
    for (i, j, v) in quad {
        if !v.is_finite() {
            return Err(ConicError::NonFinite { what: name.to_string() });
        }
        let (si, sj) = (pos(*i), pos(*j));
        if si == sj {
            p[(si, si)] += *v;
        } else {
            p[(si, sj)] += *v;
            p[(sj, si)] += *v;
        }
    }
    let eig = p.symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-10 * (1.0 + eig.eigenvalues.amax()) {
        return Err(ConicError::NonPsdQuadratic { row: name.to_string(), eigenvalue: min });
    }
    Ok(())
}

/// Lower the assembled restriction into the solver-agnostic IR with a
/// deterministic variable ordering and a variable-name map for diagnostics.
pub fn canonicalize(program: &RestrictionProgram) -> Result<ConicProgram, ConicError> {
    let total = program.layout.total;
    let mut equalities = Vec::with_capacity(program.equalities.len());
    let mut inequalities = Vec::new();
    let mut quadratics = Vec::new();

    let classify = |row: &Row| -> Result<(), ConicError> {
        check_finite_terms(&row.kind.label(), &row.linear, total)?;
        if !row.rhs.is_finite() {
            return Err(ConicError::NonFinite { what: row.kind.label() });
        }
        Ok(())
    };

    for row in &program.equalities {
        classify(row)?;
        debug_assert!(row.quad.is_empty(), "equality rows are linear");
        equalities.push(SparseRow { terms: row.linear.clone(), rhs: row.rhs, name: row.kind.label() });
    }
    for row in &program.inequalities {
        classify(row)?;
        if row.quad.is_empty() {
            inequalities.push(SparseRow { terms: row.linear.clone(), rhs: row.rhs, name: row.kind.label() });
        } else {
            check_psd_quad(&row.kind.label(), &row.quad)?;
            quadratics.push(QuadRow { quad: row.quad.clone(), terms: row.linear.clone(), rhs: row.rhs, name: row.kind.label() });
        }
    }
    check_finite_terms("objective", &program.objective_linear, total)?;
    check_psd_quad("objective", &program.objective_quad)?;

    Ok(ConicProgram {
        num_vars: total,
        minimize: program.minimize,
        objective_quad: program.objective_quad.clone(),
        objective_linear: program.objective_linear.clone(),
        equalities,
        inequalities,
        quadratics,
        bounds: program.bounds.clone(),
        var_names: program.layout.names(),
    })
}

/// Termination status of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
    IterationLimit,
}

/// Solver statistics carried back to certificates and logs.
#[derive(Debug, Clone, Serialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub solve_time_s: f64,
}

/// A solve result: primal values for every IR variable plus the objective in
/// the program's own optimization sense.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub primal: Vec<f64>,
    pub objective: f64,
    pub stats: SolverStats,
    /// Largest scaled constraint violation found by the independent re-check.
    pub feasibility_residual: f64,
}

/// What a backend must provide: primal values for all variables, a raw
/// status, and counters. No backend options leak into the IR.
pub trait ConicBackend: Send + Sync {
    fn id(&self) -> &'static str;
    fn solve_raw(
        &self,
        program: &ConicProgram,
        tol: &SolverTolerances,
        warm_start: Option<&[f64]>,
    ) -> Result<(SolveStatus, Vec<f64>, SolverStats), ConicError>;
}

/// Largest violation of the IR constraints at a point, scaled per row by the
/// magnitude of the terms involved (a row of size 1e4 satisfied to 1e-4 is
/// as tight as a unit row satisfied to 1e-8).
pub fn feasibility_residual(program: &ConicProgram, x: &[f64]) -> f64 {
    let lin_scale = |terms: &[(usize, f64)]| -> f64 { terms.iter().map(|(i, v)| (v * x[*i]).abs()).sum() };
    let quad_scale = |quad: &[(usize, usize, f64)]| -> f64 {
        quad.iter()
            .map(|(i, j, v)| if i == j { 0.5 * (v * x[*i] * x[*i]).abs() } else { (v * x[*i] * x[*j]).abs() })
            .sum()
    };
    let mut worst: f64 = 0.0;
    for row in &program.equalities {
        let scale = 1.0 + row.rhs.abs() + lin_scale(&row.terms);
        worst = worst.max((eval_linear(&row.terms, x) - row.rhs).abs() / scale);
    }
    for row in &program.inequalities {
        let scale = 1.0 + row.rhs.abs() + lin_scale(&row.terms);
        worst = worst.max((eval_linear(&row.terms, x) - row.rhs) / scale);
    }
    for row in &program.quadratics {
        let scale = 1.0 + row.rhs.abs() + lin_scale(&row.terms) + quad_scale(&row.quad);
        worst = worst.max((eval_quad(&row.quad, x) + eval_linear(&row.terms, x) - row.rhs) / scale);
    }
    for (i, (lo, hi)) in program.bounds.iter().enumerate() {
        if lo.is_finite() {
            worst = worst.max((lo - x[i]) / (1.0 + lo.abs()));
        }
        if hi.is_finite() {
            worst = worst.max((x[i] - hi) / (1.0 + hi.abs()));
        }
    }
    worst
}

/// Objective value at a point, in the program's optimization sense.
pub fn objective_value(program: &ConicProgram, x: &[f64]) -> f64 {
    eval_quad(&program.objective_quad, x) + eval_linear(&program.objective_linear, x)
}

/// Identify the worst-violated row for diagnostics.
pub fn worst_violation_row(program: &ConicProgram, x: &[f64]) -> (String, f64) {
    let lin_scale = |terms: &[(usize, f64)]| -> f64 { terms.iter().map(|(i, v)| (v * x[*i]).abs()).sum() };
    let quad_scale = |quad: &[(usize, usize, f64)]| -> f64 {
        quad.iter()
            .map(|(i, j, v)| if i == j { 0.5 * (v * x[*i] * x[*i]).abs() } else { (v * x[*i] * x[*j]).abs() })
            .sum()
    };
    let mut worst = ("none".to_string(), 0.0);
    for row in &program.equalities {
        let scale = 1.0 + row.rhs.abs() + lin_scale(&row.terms);
        let v = (eval_linear(&row.terms, x) - row.rhs).abs() / scale;
        if v > worst.1 {
            worst = (row.name.clone(), v);
        }
    }
    for row in &program.inequalities {
        let scale = 1.0 + row.rhs.abs() + lin_scale(&row.terms);
        let v = (eval_linear(&row.terms, x) - row.rhs) / scale;
        if v > worst.1 {
            worst = (row.name.clone(), v);
        }
    }
    for row in &program.quadratics {
        let scale = 1.0 + row.rhs.abs() + lin_scale(&row.terms) + quad_scale(&row.quad);
        let v = (eval_quad(&row.quad, x) + eval_linear(&row.terms, x) - row.rhs) / scale;
        if v > worst.1 {
            worst = (row.name.clone(), v);
        }
    }
    worst
}

/// Acceptance threshold for the independent feasibility re-check.
pub const RECHECK_TOL: f64 = 1e-6;

/// Solve through the attached backend, then re-validate the returned point
/// against the IR before reporting it optimal.
pub fn solve(
    program: &ConicProgram,
    tol: &SolverTolerances,
    backend: &dyn ConicBackend,
    warm_start: Option<&[f64]>,
) -> Result<SolveOutcome, ConicError> {
    let (status, primal, stats) = backend.solve_raw(program, tol, warm_start)?;
    if std::env::var_os("SCRMPC_DEBUG").is_some() {
        eprintln!("[conic] backend status {status:?} after {} iters", stats.iterations);
    }
    let (status, residual, objective) = match status {
        SolveStatus::Optimal => {
            let residual = feasibility_residual(program, &primal);
            let objective = objective_value(program, &primal);
            if residual > RECHECK_TOL {
                if std::env::var_os("SCRMPC_DEBUG").is_some() {
                    let (row, v) = worst_violation_row(program, &primal);
                    eprintln!("[conic] re-check residual {residual:.3e} exceeds {RECHECK_TOL:.1e} (worst row '{row}' at {v:.3e})");
                }
                (SolveStatus::NumericalFailure, residual, objective)
            } else {
                (SolveStatus::Optimal, residual, objective)
            }
        }
        other => (other, f64::NAN, f64::NAN),
    };
    Ok(SolveOutcome { status, primal, objective, stats, feasibility_residual: residual })
}

// ---------------------------------------------------------------------------
// Clarabel backend

/// Interior-point conic backend. Quadratic rows are lowered to second-order
/// cones via `½‖Fv‖² ≤ y ⇔ ‖(√2·Fv, y−1)‖ ≤ y+1` with `F` an eigenvalue
/// factor of P. Deterministic; the warm-start hint is accepted and ignored
/// (the backend has no warm-start interface).
#[derive(Debug, Default, Clone)]
pub struct ClarabelBackend;

struct TripletRows {
    entries: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
}

impl TripletRows {
    fn new() -> Self {
        Self { entries: Vec::new(), rhs: Vec::new() }
    }
    fn push_row(&mut self, terms: &[(usize, f64)], rhs: f64) {
        let row = self.rhs.len();
        for (col, v) in terms {
            self.entries.push((row, *col, *v));
        }
        self.rhs.push(rhs);
    }
    fn rows(&self) -> usize {
        self.rhs.len()
    }
}

fn to_csc(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> clarabel::algebra::CscMatrix<f64> {
    entries.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; cols + 1];
    let mut rowval = Vec::with_capacity(entries.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(entries.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in entries {
        if last == Some((c, r)) {
            *nzval.last_mut().expect("entry exists") += v;
        } else {
            rowval.push(r);
            nzval.push(v);
            colptr[c + 1] += 1;
            last = Some((c, r));
        }
    }
    for c in 0..cols {
        colptr[c + 1] += colptr[c];
    }
    clarabel::algebra::CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

/// Eigen-factor of the quadratic entries over their support: returns the
/// factor rows (each a sparse vector over program ids) such that
/// ½vᵀPv = ½‖Fv‖².
fn factor_quad(quad: &[(usize, usize, f64)]) -> Vec<Vec<(usize, f64)>> {
    let mut support: Vec<usize> = quad.iter().flat_map(|(i, j, _)| [*i, *j]).collect();
    support.sort_unstable();
    support.dedup();
    let pos = |id: usize| support.binary_search(&id).unwrap();
    let d = support.len();
    let mut p = DMatrix::<f64>::zeros(d, d);
    for (i, j, v) in quad {
        let (si, sj) = (pos(*i), pos(*j));
        if si == sj {
            p[(si, si)] += *v;
        } else {
            p[(si, sj)] += *v;
            p[(sj, si)] += *v;
        }
    }
    let eig = p.symmetric_eigen();
    let lam_max = eig.eigenvalues.amax();
    let mut factors = Vec::new();
    for (k, lam) in eig.eigenvalues.iter().enumerate() {
        if *lam > 1e-12 * (1.0 + lam_max) {
            let s = lam.sqrt();
            let row: Vec<(usize, f64)> = (0..d)
                .filter_map(|i| {
                    let v = s * eig.eigenvectors[(i, k)];
                    (v.abs() > 0.0).then_some((support[i], v))
                })
                .collect();
            factors.push(row);
        }
    }
    factors
}

impl ConicBackend for ClarabelBackend {
    fn id(&self) -> &'static str {
        "clarabel"
    }

    fn solve_raw(
        &self,
        program: &ConicProgram,
        tol: &SolverTolerances,
        _warm_start: Option<&[f64]>,
    ) -> Result<(SolveStatus, Vec<f64>, SolverStats), ConicError> {
        use clarabel::algebra::CscMatrix;
        use clarabel::solver::{
            DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus as Raw, SupportedConeT, ZeroConeT,
        };

        let n = program.num_vars;
        let sign = if program.minimize { 1.0 } else { -1.0 };

        // per-row equilibration: bring every row's largest coefficient to ~1 so
        // the cone offsets introduced by the SOC lowering stay well scaled
        let row_scale = |terms: &[(usize, f64)], quad: &[(usize, usize, f64)], rhs: f64| -> f64 {
            let mut s: f64 = rhs.abs();
            for (_, v) in terms {
                s = s.max(v.abs());
            }
            for (_, _, v) in quad {
                s = s.max(v.abs());
            }
            s.clamp(1e-8, 1e8).max(1e-12)
        };
        let scale_terms = |terms: &[(usize, f64)], s: f64| -> Vec<(usize, f64)> {
            terms.iter().map(|(i, v)| (*i, v / s)).collect()
        };

        // objective
        let mut p_entries: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, v) in &program.objective_quad {
            let (a, b) = if i <= j { (*i, *j) } else { (*j, *i) };
            p_entries.push((a, b, sign * v));
        }
        let p_mat: CscMatrix<f64> = to_csc(n, n, p_entries);
        let mut q = vec![0.0; n];
        for (i, v) in &program.objective_linear {
            q[*i] += sign * v;
        }

        // constraint rows in cone order: zero cone, nonnegative cone, SOCs
        let mut rows = TripletRows::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

        for row in &program.equalities {
            let s = row_scale(&row.terms, &[], row.rhs);
            rows.push_row(&scale_terms(&row.terms, s), row.rhs / s);
        }
        if !program.equalities.is_empty() {
            cones.push(ZeroConeT(program.equalities.len()));
        }

        // quadratic rows with a vanished quadratic part degrade to linear rows
        let mut soc_blocks: Vec<(QuadRow, Vec<Vec<(usize, f64)>>)> = Vec::new();
        let mut degenerate: Vec<QuadRow> = Vec::new();
        for qr in &program.quadratics {
            let s = row_scale(&qr.terms, &qr.quad, qr.rhs);
            let scaled = QuadRow {
                quad: qr.quad.iter().map(|(i, j, v)| (*i, *j, v / s)).collect(),
                terms: scale_terms(&qr.terms, s),
                rhs: qr.rhs / s,
                name: qr.name.clone(),
            };
            let factors = factor_quad(&scaled.quad);
            if factors.is_empty() {
                degenerate.push(scaled);
            } else {
                soc_blocks.push((scaled, factors));
            }
        }

        let mut nonneg = 0usize;
        for row in &program.inequalities {
            let s = row_scale(&row.terms, &[], row.rhs);
            rows.push_row(&scale_terms(&row.terms, s), row.rhs / s);
            nonneg += 1;
        }
        for qr in &degenerate {
            rows.push_row(&qr.terms, qr.rhs);
            nonneg += 1;
        }
        for (i, (lo, hi)) in program.bounds.iter().enumerate() {
            if lo.is_finite() {
                rows.push_row(&[(i, -1.0)], -lo);
                nonneg += 1;
            }
            if hi.is_finite() {
                rows.push_row(&[(i, 1.0)], *hi);
                nonneg += 1;
            }
        }
        if nonneg > 0 {
            cones.push(NonnegativeConeT(nonneg));
        }

        for (qr, factors) in &soc_blocks {
            // s₀ = (rhs − aᵀv) + 1, s_mid = √2·Fv, s_last = (rhs − aᵀv) − 1
            rows.push_row(&qr.terms, qr.rhs + 1.0);
            let sqrt2 = std::f64::consts::SQRT_2;
            for f_row in factors.iter() {
                let neg: Vec<(usize, f64)> = f_row.iter().map(|(i, v)| (*i, -sqrt2 * v)).collect();
                rows.push_row(&neg, 0.0);
            }
            rows.push_row(&qr.terms, qr.rhs - 1.0);
            cones.push(SecondOrderConeT(factors.len() + 2));
        }

        let a_mat: CscMatrix<f64> = to_csc(rows.rows(), n, rows.entries.clone());
        let b = rows.rhs.clone();

        // the backend's tolerances apply to its internally equilibrated system;
        // drive it one order tighter than the IR-level targets so the
        // independent re-check holds with headroom. Reduced-accuracy ("almost")
        // exits are disabled: an almost-solved point fails the re-check anyway.
        let tighten = |t: f64| (t * 1e-1).max(1e-10);
        let settings = DefaultSettings {
            verbose: false,
            max_iter: (tol.max_iterations as u32).max(50),
            tol_feas: tighten(tol.feasibility),
            tol_gap_abs: tighten(tol.gap_abs),
            tol_gap_rel: tighten(tol.gap_rel),
            reduced_tol_gap_abs: tighten(tol.gap_abs),
            reduced_tol_gap_rel: tighten(tol.gap_rel),
            reduced_tol_feas: tighten(tol.feasibility),
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p_mat, &q, &a_mat, &b, &cones, settings)
            .map_err(|e| ConicError::Backend(format!("{e:?}")))?;
        solver.solve();

        let status = match solver.solution.status {
            Raw::Solved | Raw::AlmostSolved => SolveStatus::Optimal,
            Raw::PrimalInfeasible | Raw::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            Raw::DualInfeasible | Raw::AlmostDualInfeasible => SolveStatus::Unbounded,
            Raw::MaxIterations | Raw::MaxTime => SolveStatus::IterationLimit,
            _ => SolveStatus::NumericalFailure,
        };
        let stats = SolverStats { iterations: solver.solution.iterations as usize, solve_time_s: solver.solution.solve_time };
        Ok((status, solver.solution.x.clone(), stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_program(num_vars: usize) -> ConicProgram {
        ConicProgram {
            num_vars,
            minimize: true,
            objective_quad: vec![],
            objective_linear: vec![],
            equalities: vec![],
            inequalities: vec![],
            quadratics: vec![],
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); num_vars],
            var_names: (0..num_vars).map(|i| format!("v{i}")).collect(),
        }
    }

    #[test]
    fn empty_program_trivially_optimal_at_zero() {
        let program = empty_program(1);
        let outcome = solve(&program, &SolverTolerances::default(), &ClarabelBackend, None).unwrap();
        assert_eq!(outcome.status, SolveStatus::Optimal);
        assert!(outcome.objective.abs() < 1e-9);
    }

    #[test]
    fn minimize_with_lower_bound() {
        let mut program = empty_program(1);
        program.objective_linear = vec![(0, 1.0)];
        program.inequalities.push(SparseRow { terms: vec![(0, -1.0)], rhs: -1.0, name: "x ≥ 1".into() });
        let outcome = solve(&program, &SolverTolerances::default(), &ClarabelBackend, None).unwrap();
        assert_eq!(outcome.status, SolveStatus::Optimal);
        assert!((outcome.primal[0] - 1.0).abs() < 1e-7);
        assert!((outcome.objective - 1.0).abs() < 1e-7);
    }

    #[test]
    fn maximize_scaled_variable() {
        let mut program = empty_program(1);
        program.minimize = false;
        program.objective_linear = vec![(0, 1.0)];
        program.inequalities.push(SparseRow { terms: vec![(0, 3.0)], rhs: 1.0, name: "3γ ≤ 1".into() });
        program.bounds[0] = (0.0, f64::INFINITY);
        let outcome = solve(&program, &SolverTolerances::default(), &ClarabelBackend, None).unwrap();
        assert_eq!(outcome.status, SolveStatus::Optimal);
        assert!((outcome.objective - 1.0 / 3.0).abs() < 1e-7, "objective {}", outcome.objective);
    }

    #[test]
    fn quadratic_constraint_lowering() {
        // minimize x subject to ½x² ≤ 2  →  x* = −2
        let mut program = empty_program(1);
        program.objective_linear = vec![(0, 1.0)];
        program.quadratics.push(QuadRow { quad: vec![(0, 0, 1.0)], terms: vec![], rhs: 2.0, name: "halfsquare".into() });
        let outcome = solve(&program, &SolverTolerances::default(), &ClarabelBackend, None).unwrap();
        assert_eq!(outcome.status, SolveStatus::Optimal);
        assert!((outcome.primal[0] + 2.0).abs() < 1e-6, "x = {}", outcome.primal[0]);
    }

    #[test]
    fn quadratic_objective() {
        // minimize ½(x−3)² = ½x² − 3x + 4.5
        let mut program = empty_program(1);
        program.objective_quad = vec![(0, 0, 1.0)];
        program.objective_linear = vec![(0, -3.0)];
        let outcome = solve(&program, &SolverTolerances::default(), &ClarabelBackend, None).unwrap();
        assert_eq!(outcome.status, SolveStatus::Optimal);
        assert!((outcome.primal[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_program_reports_status_not_error() {
        let mut program = empty_program(1);
        program.inequalities.push(SparseRow { terms: vec![(0, 1.0)], rhs: 0.0, name: "x ≤ 0".into() });
        program.inequalities.push(SparseRow { terms: vec![(0, -1.0)], rhs: -1.0, name: "x ≥ 1".into() });
        let outcome = solve(&program, &SolverTolerances::default(), &ClarabelBackend, None).unwrap();
        assert_eq!(outcome.status, SolveStatus::Infeasible);
    }

    #[test]
    fn unbounded_maximization_detected() {
        let mut program = empty_program(1);
        program.minimize = false;
        program.objective_linear = vec![(0, 1.0)];
        let outcome = solve(&program, &SolverTolerances::default(), &ClarabelBackend, None).unwrap();
        assert_eq!(outcome.status, SolveStatus::Unbounded);
    }

    #[test]
    fn equality_constraints_respected() {
        // minimize x² + y² s.t. x + y = 2 → (1, 1)
        let mut program = empty_program(2);
        program.objective_quad = vec![(0, 0, 2.0), (1, 1, 2.0)];
        program.equalities.push(SparseRow { terms: vec![(0, 1.0), (1, 1.0)], rhs: 2.0, name: "sum".into() });
        let outcome = solve(&program, &SolverTolerances::default(), &ClarabelBackend, None).unwrap();
        assert!((outcome.primal[0] - 1.0).abs() < 1e-6);
        assert!((outcome.primal[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn determinism_identical_solves() {
        let mut program = empty_program(3);
        program.objective_quad = vec![(0, 0, 2.0), (1, 1, 1.0), (0, 1, 0.3), (2, 2, 0.5)];
        program.objective_linear = vec![(0, -1.0), (2, 2.0)];
        program.inequalities.push(SparseRow { terms: vec![(0, 1.0), (1, 1.0), (2, 1.0)], rhs: 4.0, name: "cap".into() });
        program.bounds[2] = (-3.0, 3.0);
        let a = solve(&program, &SolverTolerances::default(), &ClarabelBackend, None).unwrap();
        let b = solve(&program, &SolverTolerances::default(), &ClarabelBackend, None).unwrap();
        assert_eq!(a.status, b.status);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        for (x, y) in a.primal.iter().zip(b.primal.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn warm_start_hint_equivalent_to_cold() {
        let mut program = empty_program(2);
        program.objective_quad = vec![(0, 0, 1.0), (1, 1, 1.0)];
        program.objective_linear = vec![(0, 1.0)];
        program.inequalities.push(SparseRow { terms: vec![(0, -1.0), (1, -1.0)], rhs: -1.0, name: "sum ≥ 1".into() });
        let cold = solve(&program, &SolverTolerances::default(), &ClarabelBackend, None).unwrap();
        let warm = solve(&program, &SolverTolerances::default(), &ClarabelBackend, Some(&cold.primal)).unwrap();
        assert!((cold.objective - warm.objective).abs() <= 1e-6);
    }

    #[test]
    fn recheck_rejects_bad_quadratic() {
        use crate::restriction::{ConstraintCensus, ProgramPurpose, RestrictionProgram, Row, RowKind, VarLayout};
        // hand-build a restriction with an indefinite quadratic row
        let layout = VarLayout {
            horizon: 1,
            state_q: 1,
            control_m: 0,
            u_offset: 0,
            zu_offset: 0,
            zl_offset: 2,
            env: vec![],
            y_offsets: vec![],
            y_rows: vec![],
            cost_var: None,
            gamma_var: None,
            total: 4,
        };
        let program = RestrictionProgram {
            layout,
            inequalities: vec![Row {
                kind: RowKind::CostEpigraph,
                linear: vec![],
                quad: vec![(0, 0, -1.0)],
                rhs: 0.0,
            }],
            equalities: vec![],
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); 4],
            objective_linear: vec![],
            objective_quad: vec![],
            minimize: true,
            purpose: ProgramPurpose::MinimizeWorstCost,
            census: ConstraintCensus::default(),
        };
        assert!(matches!(canonicalize(&program), Err(ConicError::NonPsdQuadratic { .. })));
    }

    #[test]
    fn csc_roundtrip_small() {
        let entries = vec![(0usize, 1usize, 2.0), (1, 0, -1.0), (0, 0, 3.0), (1, 1, 4.0)];
        let m = to_csc(2, 2, entries);
        // dense reconstruction
        let mut dense = [[0.0; 2]; 2];
        for c in 0..2 {
            for idx in m.colptr[c]..m.colptr[c + 1] {
                dense[m.rowval[idx]][c] += m.nzval[idx];
            }
        }
        assert_eq!(dense, [[3.0, 2.0], [-1.0, 4.0]]);
    }
}
