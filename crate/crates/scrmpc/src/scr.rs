//! Sequential convex restriction: the outer loop, margin certification, the
//! receding-horizon controller, and Monte-Carlo verification of certificates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::conic::{canonicalize, solve, ConicBackend, ConicError, SolveStatus, SolverTolerances};
use crate::model::{EnvelopeParams, FeedbackModel, ModelError};
use crate::restriction::{
    assemble, recheck_certificate, safety_halfspaces, CertificateCheck, ConstraintCensus, ControlBounds, CostFactors,
    ObstacleSet, ProgramPurpose, RestrictionContext, RestrictionError, SupportMode, Tube, UncertaintyModel,
};
use crate::trajectory::{rollout, tube_face_maps, SensitivityBlocks, TrajectoryError};

#[derive(Debug, Error)]
pub enum ScrError {
    #[error("initial control sequence is not robust feasible ({0}); supply a feasible seed")]
    InfeasibleAtSeed(String),
    #[error("solver failed at iteration {iteration}: {status:?}")]
    SolverFailure { iteration: usize, status: SolveStatus },
    #[error("certificate re-check failed at iteration {iteration}: {detail}")]
    CertificateInvalid { iteration: usize, detail: String },
    #[error("at least one sample required")]
    SamplesRequired,
    #[error("replanning requires period ≥ 1")]
    PeriodTooShort,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Restriction(#[from] RestrictionError),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

/// A robust MPC problem instance: model, uncertainty, obstacles, cost, and
/// envelope scaling.
#[derive(Debug, Clone)]
pub struct RobustProblem {
    pub model: FeedbackModel,
    pub uncertainty: UncertaintyModel,
    pub obstacles: ObstacleSet,
    pub cost: CostFactors,
    pub control_bounds: ControlBounds,
    pub envelope_params: EnvelopeParams,
}

impl RobustProblem {
    pub fn validate(&self) -> Result<(), ScrError> {
        let dims = self.model.dims();
        self.uncertainty.validate(dims.n, dims.r, self.model.horizon())?;
        self.obstacles.validate(dims.n)?;
        self.control_bounds.validate()?;
        Ok(())
    }
}

/// Loop controls for the sequential restriction.
#[derive(Debug, Clone)]
pub struct ScrOptions {
    /// Objective-change convergence threshold.
    pub epsilon: f64,
    /// Iteration cap for the outer loop.
    pub max_iterations: usize,
    /// Safety margin standing in for the strict inequality.
    pub eps_safe: f64,
    /// Self-map slack absorbing solver feasibility residuals.
    pub eps_tube: f64,
    pub tolerances: SolverTolerances,
}

impl Default for ScrOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_iterations: 50,
            eps_safe: 1e-6,
            eps_tube: 1e-4,
            tolerances: SolverTolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrStatus {
    Converged,
    IterationLimit,
    /// Solver failed mid-run; the carried solution is the last certified iterate.
    SolverStalled,
}

/// A robust-feasible control trajectory with its certified tube and cost bound.
#[derive(Debug, Clone)]
pub struct CertifiedSolution {
    pub controls: Vec<DVector<f64>>,
    pub tube: Tube,
    pub gamma_init: f64,
    pub gamma_dyn: f64,
    /// Exact worst-case cost bound over the tube.
    pub cost_upper: f64,
    /// Disturbance-free rollout of the controls.
    pub nominal_states: Vec<DVector<f64>>,
    pub iterations: usize,
    pub objective_history: Vec<f64>,
    pub status: ScrStatus,
    pub census: ConstraintCensus,
    pub check: CertificateCheck,
    pub solve_time_s: f64,
    pub solver_iterations_last: usize,
}

fn extract_controls(primal: &[f64], layout: &crate::restriction::VarLayout) -> Vec<DVector<f64>> {
    (0..layout.horizon)
        .map(|t| DVector::from_iterator(layout.control_m, (0..layout.control_m).map(|j| primal[layout.u_var(t, j)])))
        .collect()
}

fn extract_tube(primal: &[f64], layout: &crate::restriction::VarLayout) -> Tube {
    let upper = (0..=layout.horizon)
        .map(|t| DVector::from_iterator(layout.state_q, (0..layout.state_q).map(|i| primal[layout.zu_var(t, i)])))
        .collect();
    let lower = (0..=layout.horizon)
        .map(|t| DVector::from_iterator(layout.state_q, (0..layout.state_q).map(|i| primal[layout.zl_var(t, i)])))
        .collect();
    Tube { upper, lower }
}

/// Sequential convex restriction: repeatedly (a) refresh the obstacle witness
/// points at the nominal, (b) assemble and solve the restriction, (c) roll
/// the new controls out as the next nominal, until the objective settles.
/// Every iterate is robust feasible; the last one is returned with its
/// certificate.
pub fn scr_solve(
    problem: &RobustProblem,
    init_u: &[DVector<f64>],
    options: &ScrOptions,
    backend: &dyn ConicBackend,
) -> Result<CertifiedSolution, ScrError> {
    problem.validate()?;
    let mut model = problem.model.clone();
    let w0 = &problem.uncertainty.w_nominal;
    let x_init = problem.uncertainty.w_init_nominal.clone();

    let mut u_nominal: Vec<DVector<f64>> = init_u.to_vec();
    let mut best: Option<CertifiedSolution> = None;
    let mut history: Vec<f64> = Vec::new();
    let mut warm: Option<Vec<f64>> = None;
    let mut total_solve_time = 0.0;

    for iteration in 0..options.max_iterations {
        model.register_nominal_rollout(u_nominal.clone(), x_init.clone(), w0.clone())?;
        let nominal_x = model.nominal()?.x.clone();

        let safety = match safety_halfspaces(&model, &nominal_x, &problem.obstacles) {
            Ok(s) => s,
            Err(e @ RestrictionError::NominalInsideObstacle { .. }) => {
                if let Some(mut cert) = best {
                    cert.status = ScrStatus::SolverStalled;
                    return Ok(cert);
                }
                return Err(ScrError::InfeasibleAtSeed(e.to_string()));
            }
            Err(e) => return Err(e.into()),
        };
        let blocks = SensitivityBlocks::new(&model)?;
        let maps = tube_face_maps(&model, &blocks)?;
        let ctx = RestrictionContext {
            model: &model,
            maps: &maps,
            uncertainty: &problem.uncertainty,
            safety: &safety,
            cost: &problem.cost,
            control_bounds: &problem.control_bounds,
            envelope_params: &problem.envelope_params,
            eps_safe: options.eps_safe,
            eps_tube: options.eps_tube,
        };
        let program = assemble(&ctx, ProgramPurpose::MinimizeWorstCost)?;
        let conic = canonicalize(&program)?;
        let outcome = solve(&conic, &options.tolerances, backend, warm.as_deref())?;
        total_solve_time += outcome.stats.solve_time_s;

        if outcome.status != SolveStatus::Optimal {
            if let Some(mut cert) = best {
                cert.status = ScrStatus::SolverStalled;
                return Ok(cert);
            }
            return match outcome.status {
                SolveStatus::Infeasible => Err(ScrError::InfeasibleAtSeed(format!(
                    "restriction infeasible at the initial nominal (status {:?})",
                    outcome.status
                ))),
                status => Err(ScrError::SolverFailure { iteration, status }),
            };
        }

        let controls = extract_controls(&outcome.primal, &program.layout);
        let tube = extract_tube(&outcome.primal, &program.layout);
        let check = recheck_certificate(&ctx, &tube, &controls)?;
        if !check.is_valid() {
            if let Some(mut cert) = best {
                cert.status = ScrStatus::SolverStalled;
                return Ok(cert);
            }
            return Err(ScrError::CertificateInvalid {
                iteration,
                detail: format!(
                    "selfmap slack {:.3e}, safety slack {:.3e}, ordered {}",
                    check.min_selfmap_slack, check.min_safety_slack, check.tube_ordered
                ),
            });
        }

        history.push(outcome.objective);
        let nominal_next = rollout(&model, &x_init, &controls, w0)?;
        let cert = CertifiedSolution {
            cost_upper: check.exact_cost_upper,
            controls: controls.clone(),
            tube,
            gamma_init: problem.uncertainty.gamma_init,
            gamma_dyn: problem.uncertainty.gamma_dyn,
            nominal_states: nominal_next,
            iterations: iteration + 1,
            objective_history: history.clone(),
            status: ScrStatus::IterationLimit,
            census: program.census.clone(),
            check,
            solve_time_s: total_solve_time,
            solver_iterations_last: outcome.stats.iterations,
        };
        let converged = history.len() >= 2 && {
            let k = history.len();
            (history[k - 1] - history[k - 2]).abs() < options.epsilon
        };
        best = Some(cert);
        if converged {
            let mut cert = best.unwrap();
            cert.status = ScrStatus::Converged;
            return Ok(cert);
        }
        u_nominal = controls;
        warm = Some(outcome.primal);
    }
    Ok(best.expect("at least one iteration ran"))
}

// ---------------------------------------------------------------------------
// margin certification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    Init,
    Dynamics,
    Joint,
}

impl MarginMode {
    pub fn support_mode(self) -> SupportMode {
        match self {
            MarginMode::Init => SupportMode::MarginInit,
            MarginMode::Dynamics => SupportMode::MarginDynamics,
            MarginMode::Joint => SupportMode::MarginJoint,
        }
    }

    /// Uncertainty with the off-mode blocks zeroed and radius γ.
    fn scaled_uncertainty(self, base: &UncertaintyModel, gamma: f64) -> UncertaintyModel {
        let mut unc = base.clone();
        match self {
            MarginMode::Init => {
                unc.gamma_init = gamma;
                unc.gamma_dyn = 0.0;
            }
            MarginMode::Dynamics => {
                unc.gamma_init = 0.0;
                unc.gamma_dyn = gamma;
            }
            MarginMode::Joint => {
                unc.gamma_init = gamma;
                unc.gamma_dyn = gamma;
            }
        }
        unc
    }
}

/// A certified lower bound on the robustness margin of a fixed control
/// trajectory.
#[derive(Debug, Clone)]
pub struct MarginCertificate {
    pub gamma: f64,
    pub mode: MarginMode,
    pub tube: Option<Tube>,
    pub check: Option<CertificateCheck>,
    pub diagnostic: String,
    pub solve_time_s: f64,
}

/// Maximize the uncertainty radius subject to the restriction at fixed
/// controls. Returns a certified lower bound on the true margin; 0 with a
/// diagnostic when even the zero radius is not certifiable.
pub fn certify_margin(
    problem: &RobustProblem,
    u_nominal: &[DVector<f64>],
    mode: MarginMode,
    options: &ScrOptions,
    backend: &dyn ConicBackend,
) -> Result<MarginCertificate, ScrError> {
    problem.validate()?;
    let mut model = problem.model.clone();
    let w0 = &problem.uncertainty.w_nominal;
    let x_init = problem.uncertainty.w_init_nominal.clone();
    model.register_nominal_rollout(u_nominal.to_vec(), x_init, w0.clone())?;
    let nominal_x = model.nominal()?.x.clone();

    let safety = match safety_halfspaces(&model, &nominal_x, &problem.obstacles) {
        Ok(s) => s,
        Err(e @ RestrictionError::NominalInsideObstacle { .. }) => {
            return Ok(MarginCertificate {
                gamma: 0.0,
                mode,
                tube: None,
                check: None,
                diagnostic: format!("no slack at the nominal: {e}"),
                solve_time_s: 0.0,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let blocks = SensitivityBlocks::new(&model)?;
    let maps = tube_face_maps(&model, &blocks)?;
    let ctx = RestrictionContext {
        model: &model,
        maps: &maps,
        uncertainty: &problem.uncertainty,
        safety: &safety,
        cost: &problem.cost,
        control_bounds: &problem.control_bounds,
        envelope_params: &problem.envelope_params,
        eps_safe: options.eps_safe,
        eps_tube: options.eps_tube,
    };
    let program = assemble(&ctx, ProgramPurpose::MaximizeMargin(mode.support_mode()))?;
    let conic = canonicalize(&program)?;
    let outcome = solve(&conic, &options.tolerances, backend, None)?;

    match outcome.status {
        SolveStatus::Optimal => {
            let gamma = outcome.objective.max(0.0);
            let tube = extract_tube(&outcome.primal, &program.layout);
            // exact re-check at the certified radius
            let scaled = mode.scaled_uncertainty(&problem.uncertainty, gamma);
            let ctx_check = RestrictionContext { uncertainty: &scaled, ..ctx };
            let check = recheck_certificate(&ctx_check, &tube, u_nominal)?;
            let diagnostic = if check.is_valid() {
                String::new()
            } else {
                format!("re-check slack {:.3e} at certified radius", check.min_selfmap_slack)
            };
            Ok(MarginCertificate { gamma, mode, tube: Some(tube), check: Some(check), diagnostic, solve_time_s: outcome.stats.solve_time_s })
        }
        SolveStatus::Infeasible => Ok(MarginCertificate {
            gamma: 0.0,
            mode,
            tube: None,
            check: None,
            diagnostic: "restriction infeasible even at zero radius".to_string(),
            solve_time_s: outcome.stats.solve_time_s,
        }),
        SolveStatus::Unbounded => Ok(MarginCertificate {
            gamma: f64::INFINITY,
            mode,
            tube: None,
            check: None,
            diagnostic: "margin unbounded (no active safety restriction)".to_string(),
            solve_time_s: outcome.stats.solve_time_s,
        }),
        status => Err(ScrError::SolverFailure { iteration: 0, status }),
    }
}

// ---------------------------------------------------------------------------
// sampling

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, tag_a: u64, tag_b: u64) -> u64 {
    splitmix64(splitmix64(seed ^ tag_a.wrapping_mul(0xA24BAED4963EE407)) ^ tag_b)
}

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    // Box–Muller; u1 bounded away from zero
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_direction(rng: &mut ChaCha12Rng, dim: usize) -> DVector<f64> {
    if dim == 0 {
        return DVector::zeros(0);
    }
    loop {
        let g = DVector::from_fn(dim, |_, _| gaussian(rng));
        let norm = g.norm();
        if norm > 1e-12 {
            return g / norm;
        }
    }
}

/// Uniform-in-ellipsoid and boundary sampling from a symmetric square-root
/// factor: `w = center + factor·(direction · scale)`.
fn sample_ellipsoid(rng: &mut ChaCha12Rng, center: &DVector<f64>, factor: &DMatrix<f64>, boundary: bool) -> DVector<f64> {
    let dim = center.len();
    let dir = sample_direction(rng, dim);
    let scale = if boundary || dim == 0 {
        1.0
    } else {
        rng.random::<f64>().powf(1.0 / dim as f64)
    };
    center + factor * (scale * dir)
}

fn sigma_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let lam = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose()
}

// ---------------------------------------------------------------------------
// Monte-Carlo verification

/// Findings of a verification run; violations are data, not errors.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub samples: usize,
    pub tube_exits: usize,
    pub obstacle_hits: usize,
    pub cost_violations: usize,
    pub max_cost: f64,
    pub cost_upper: f64,
    /// Largest tube-box violation seen (negative when everything stayed inside).
    pub worst_tube_violation: f64,
    pub first_failure: Option<String>,
}

impl VerificationReport {
    pub fn violations(&self) -> usize {
        self.tube_exits + self.obstacle_hits + self.cost_violations
    }
}

struct SampleOutcome {
    tube_exit: bool,
    obstacle_hit: bool,
    cost: f64,
    worst_violation: f64,
    failure: Option<String>,
}

/// Roll sampled disturbances through the true dynamics and check them against
/// the certificate: tube containment per stage, zero obstacle intersections,
/// and the worst-case cost bound. Half the samples sit on the uncertainty
/// boundary, half are uniform in the interior; seeds are split per sample and
/// stage so the report is independent of scheduling.
pub fn monte_carlo_verify(
    problem: &RobustProblem,
    certificate: &CertifiedSolution,
    samples: usize,
    seed: u64,
) -> Result<VerificationReport, ScrError> {
    if samples == 0 {
        return Err(ScrError::SamplesRequired);
    }
    let model = &problem.model;
    let horizon = model.horizon();
    let unc = &problem.uncertainty;
    let init_factor = sigma_sqrt(&unc.sigma_init) * unc.gamma_init;
    let stage_factors: Vec<DMatrix<f64>> = unc.sigma_stage.iter().map(|s| sigma_sqrt(s) * unc.gamma_dyn).collect();

    let outcomes: Vec<SampleOutcome> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let boundary = i % 2 == 1;
            let mut rng_init = ChaCha12Rng::seed_from_u64(derive_seed(seed, i as u64, u64::MAX));
            let w_init = sample_ellipsoid(&mut rng_init, &unc.w_init_nominal, &init_factor, boundary);
            let w: Vec<DVector<f64>> = (0..horizon)
                .map(|t| {
                    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, i as u64, t as u64));
                    sample_ellipsoid(&mut rng, &unc.w_nominal[t], &stage_factors[t], boundary)
                })
                .collect();
            match rollout(model, &w_init, &certificate.controls, &w) {
                Err(e) => SampleOutcome {
                    tube_exit: true,
                    obstacle_hit: false,
                    cost: f64::INFINITY,
                    worst_violation: f64::INFINITY,
                    failure: Some(format!("sample {i}: {e}")),
                },
                Ok(x) => {
                    let mut worst = f64::NEG_INFINITY;
                    let mut tube_exit = false;
                    let mut obstacle_hit = false;
                    let mut failure = None;
                    for t in 0..=horizon {
                        let z = model.c_map(t) * &x[t];
                        let v = certificate.tube.violation(t, &z);
                        worst = worst.max(v);
                        if v > 0.0 && !tube_exit {
                            tube_exit = true;
                            failure.get_or_insert(format!("sample {i}: tube exit at stage {t} by {v:.3e}"));
                        }
                        if t >= 1 {
                            if let Some(o) = problem.obstacles.hit(t, &x[t]) {
                                if !obstacle_hit {
                                    obstacle_hit = true;
                                    failure.get_or_insert(format!("sample {i}: obstacle {o} hit at stage {t}"));
                                }
                            }
                        }
                    }
                    let cost = problem.cost.trajectory_cost(&x, &certificate.controls);
                    SampleOutcome { tube_exit, obstacle_hit, cost, worst_violation: worst, failure }
                }
            }
        })
        .collect();

    let mut report = VerificationReport {
        samples,
        tube_exits: 0,
        obstacle_hits: 0,
        cost_violations: 0,
        max_cost: f64::NEG_INFINITY,
        cost_upper: certificate.cost_upper,
        worst_tube_violation: f64::NEG_INFINITY,
        first_failure: None,
    };
    for o in outcomes {
        if o.tube_exit {
            report.tube_exits += 1;
        }
        if o.obstacle_hit {
            report.obstacle_hits += 1;
        }
        if o.cost > certificate.cost_upper + 1e-6 {
            report.cost_violations += 1;
        }
        report.max_cost = report.max_cost.max(o.cost);
        report.worst_tube_violation = report.worst_tube_violation.max(o.worst_violation);
        if report.first_failure.is_none() {
            report.first_failure = o.failure;
        }
    }
    Ok(report)
}

/// Empirical margin by bisection over Monte-Carlo safety checks: the largest
/// radius at which no sampled disturbance produces an obstacle hit. An
/// over-estimate of the true margin (sampling misses worst cases), hence a
/// sound upper reference for certified margins.
pub fn empirical_margin_bisect(
    problem: &RobustProblem,
    u_nominal: &[DVector<f64>],
    mode: MarginMode,
    samples: usize,
    seed: u64,
) -> Result<f64, ScrError> {
    if samples == 0 {
        return Err(ScrError::SamplesRequired);
    }
    let model = &problem.model;
    let horizon = model.horizon();

    let safe_at = |gamma: f64| -> Result<bool, ScrError> {
        let unc = mode.scaled_uncertainty(&problem.uncertainty, gamma);
        let init_factor = sigma_sqrt(&unc.sigma_init) * unc.gamma_init;
        let stage_factors: Vec<DMatrix<f64>> = unc.sigma_stage.iter().map(|s| sigma_sqrt(s) * unc.gamma_dyn).collect();
        for i in 0..samples {
            let boundary = i % 2 == 1;
            let mut rng_init = ChaCha12Rng::seed_from_u64(derive_seed(seed, i as u64, u64::MAX));
            let w_init = sample_ellipsoid(&mut rng_init, &unc.w_init_nominal, &init_factor, boundary);
            let w: Vec<DVector<f64>> = (0..horizon)
                .map(|t| {
                    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, i as u64, t as u64));
                    sample_ellipsoid(&mut rng, &unc.w_nominal[t], &stage_factors[t], boundary)
                })
                .collect();
            let x = match rollout(model, &w_init, u_nominal, &w) {
                Ok(x) => x,
                Err(_) => return Ok(false),
            };
            for t in 1..=horizon {
                if problem.obstacles.hit(t, &x[t]).is_some() {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    };

    if !safe_at(0.0)? {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    while safe_at(hi)? {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 40 {
            return Ok(lo);
        }
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if safe_at(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

// ---------------------------------------------------------------------------
// receding horizon

/// Where the plant disturbances come from during a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisturbanceSource {
    /// Apply the nominal disturbance (disturbance-free closed loop).
    Nominal,
    /// Sample uniformly from the stage uncertainty set.
    Sampled,
}

/// One replanning cycle of the closed-loop run.
#[derive(Debug, Clone, Serialize)]
pub struct CycleLog {
    pub step: usize,
    pub replanned: bool,
    pub scr_iterations: usize,
    pub objective: f64,
    pub cost_upper: f64,
    pub solve_time_s: f64,
    pub event: Option<String>,
}

/// Closed-loop run artifacts.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cycles: Vec<CycleLog>,
    pub tubes: Vec<Tube>,
    pub realized_cost: f64,
    pub replan_period: usize,
    pub events: Vec<String>,
}

/// Receding-horizon MPC: plan with `scr_solve`, apply the first
/// `replan_period` controls to the simulated plant, re-plan from the measured
/// state with the shifted previous solution as the warm seed. On replan
/// infeasibility the remaining tail of the last certified plan is executed.
pub fn receding_horizon_run(
    problem: &RobustProblem,
    options: &ScrOptions,
    backend: &dyn ConicBackend,
    total_steps: usize,
    replan_period: usize,
    disturbance: DisturbanceSource,
    seed: u64,
) -> Result<RunLog, ScrError> {
    if replan_period == 0 {
        return Err(ScrError::PeriodTooShort);
    }
    problem.validate()?;
    let model = &problem.model;
    let horizon = model.horizon();
    let dims = model.dims();
    let zero_u = vec![DVector::zeros(dims.m); horizon];

    let stage_factors: Vec<DMatrix<f64>> =
        problem.uncertainty.sigma_stage.iter().map(|s| sigma_sqrt(s) * problem.uncertainty.gamma_dyn).collect();

    let mut x_current = problem.uncertainty.w_init_nominal.clone();
    let mut states = vec![x_current.clone()];
    let mut controls = Vec::new();
    let mut cycles = Vec::new();
    let mut tubes = Vec::new();
    let mut events = Vec::new();

    // active plan and our position inside it
    let mut plan: Vec<DVector<f64>> = zero_u.clone();
    let mut plan_pos = 0usize;
    let mut seed_u: Vec<DVector<f64>> = zero_u.clone();

    let mut step = 0usize;
    while step < total_steps {
        // re-plan from the measured state
        let mut cycle_problem = problem.clone();
        cycle_problem.uncertainty.w_init_nominal = x_current.clone();

        let mut replanned = false;
        let mut event = None;
        let mut attempt_seeds: Vec<Vec<DVector<f64>>> = vec![seed_u.clone()];
        // terminal-value pad as the fallback seed
        if let Some(last) = seed_u.last() {
            let mut padded = seed_u.clone();
            for slot in padded.iter_mut().rev().take(replan_period.min(horizon)) {
                *slot = last.clone();
            }
            attempt_seeds.push(padded);
        }
        attempt_seeds.push(zero_u.clone());

        let mut solved = None;
        for candidate in attempt_seeds {
            match scr_solve(&cycle_problem, &candidate, options, backend) {
                Ok(cert) => {
                    solved = Some(cert);
                    break;
                }
                Err(ScrError::InfeasibleAtSeed(msg)) => {
                    event = Some(format!("step {step}: seed rejected ({msg})"));
                }
                Err(other) => return Err(other),
            }
        }

        match solved {
            Some(cert) => {
                plan = cert.controls.clone();
                plan_pos = 0;
                replanned = true;
                tubes.push(cert.tube.clone());
                cycles.push(CycleLog {
                    step,
                    replanned,
                    scr_iterations: cert.iterations,
                    objective: *cert.objective_history.last().unwrap_or(&f64::NAN),
                    cost_upper: cert.cost_upper,
                    solve_time_s: cert.solve_time_s,
                    event: event.clone(),
                });
            }
            None => {
                let msg = event.unwrap_or_else(|| format!("step {step}: replanning infeasible"));
                events.push(format!("{msg}; executing the tail of the previous plan"));
                cycles.push(CycleLog {
                    step,
                    replanned,
                    scr_iterations: 0,
                    objective: f64::NAN,
                    cost_upper: f64::NAN,
                    solve_time_s: 0.0,
                    event: Some("replan infeasible".to_string()),
                });
            }
        }

        // apply replan_period controls (or fall back to the stale tail)
        for _ in 0..replan_period {
            if step >= total_steps {
                break;
            }
            let u = if plan_pos < plan.len() {
                plan[plan_pos].clone()
            } else {
                events.push(format!("step {step}: plan exhausted, applying zero control"));
                DVector::zeros(dims.m)
            };
            let stage = plan_pos.min(horizon - 1);
            let w = match disturbance {
                DisturbanceSource::Nominal => problem.uncertainty.w_nominal[stage].clone(),
                DisturbanceSource::Sampled => {
                    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, step as u64, 0x5eed));
                    sample_ellipsoid(&mut rng, &problem.uncertainty.w_nominal[stage], &stage_factors[stage], false)
                }
            };
            let next = model.eval_dynamics(stage, &x_current, &u, &w)?;
            controls.push(u);
            states.push(next.clone());
            x_current = next;
            plan_pos += 1;
            step += 1;
        }

        // shifted warm seed for the next cycle, zero-padded
        seed_u = plan.iter().skip(plan_pos).cloned().collect();
        while seed_u.len() < horizon {
            seed_u.push(DVector::zeros(dims.m));
        }
        seed_u = seed_u.into_iter().map(|u| problem.control_bounds.clamp(&u)).collect();
    }

    // realized cost over the executed trajectory
    let mut realized_cost = 0.0;
    for (t, u) in controls.iter().enumerate() {
        let q = problem.cost.q_sqrt_at(t.min(problem.cost.q_sqrt.len() - 1));
        realized_cost += 0.5 * (q * &states[t]).norm_squared();
        let r = &problem.cost.r_sqrt[t.min(problem.cost.r_sqrt.len() - 1)];
        realized_cost += 0.5 * (r * u).norm_squared();
    }
    realized_cost += 0.5 * (&problem.cost.q_sqrt_terminal * states.last().unwrap()).norm_squared();

    Ok(RunLog { states, controls, cycles, tubes, realized_cost, replan_period, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::linear_model;
    use crate::restriction::{Obstacle, ObstacleShape};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    /// The 1-D accumulation chain: x⁺ = x + w, safety x < 1, margin 1/3 at N=2.
    pub(crate) fn chain_problem() -> RobustProblem {
        let model = linear_model(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            2,
        )
        .unwrap();
        let obstacle = Obstacle::full(
            ObstacleShape::Polytope { a: DMatrix::from_row_slice(1, 1, &[-1.0]), b: dv(&[-1.0]) },
            1,
        );
        RobustProblem {
            model,
            uncertainty: UncertaintyModel {
                sigma_init: DMatrix::identity(1, 1),
                sigma_stage: vec![DMatrix::identity(1, 1); 2],
                gamma_init: 1.0,
                gamma_dyn: 1.0,
                w_init_nominal: dv(&[0.0]),
                w_nominal: vec![dv(&[0.0]); 2],
            },
            obstacles: ObstacleSet::time_invariant(vec![obstacle], 2),
            cost: CostFactors::time_invariant(DMatrix::identity(1, 1), DMatrix::identity(1, 1), 2),
            control_bounds: ControlBounds { lower: dv(&[-1.0]), upper: dv(&[1.0]) },
            envelope_params: EnvelopeParams::default(),
        }
    }

    #[test]
    fn chain_margin_is_one_third() {
        let problem = chain_problem();
        let u = vec![dv(&[0.0]); 2];
        let options = ScrOptions::default();
        let cert = certify_margin(&problem, &u, MarginMode::Joint, &options, &crate::conic::ClarabelBackend).unwrap();
        // worst case x₂ = w_init + w_0 + w_1 = 3γ must stay below 1
        assert!(
            (cert.gamma - 1.0 / 3.0).abs() < 1e-4 + options.eps_safe,
            "certified {} vs 1/3",
            cert.gamma
        );
        assert!(cert.check.unwrap().is_valid());
    }

    #[test]
    fn margin_zero_when_nominal_touches_obstacle() {
        let mut problem = chain_problem();
        problem.uncertainty.w_init_nominal = dv(&[1.0]); // exactly on the boundary x = 1
        let cert = certify_margin(&problem, &vec![dv(&[0.0]); 2], MarginMode::Joint, &ScrOptions::default(), &crate::conic::ClarabelBackend).unwrap();
        assert_eq!(cert.gamma, 0.0);
        assert!(!cert.diagnostic.is_empty());
    }

    #[test]
    fn margin_unbounded_without_obstacles() {
        let mut problem = chain_problem();
        problem.obstacles = ObstacleSet::time_invariant(vec![], 2);
        let cert = certify_margin(&problem, &vec![dv(&[0.0]); 2], MarginMode::Joint, &ScrOptions::default(), &crate::conic::ClarabelBackend).unwrap();
        assert!(cert.gamma.is_infinite());
    }

    #[test]
    fn monte_carlo_requires_samples() {
        let problem = chain_problem();
        let cert = scr_solve(&problem, &vec![dv(&[0.0]); 2], &ScrOptions::default(), &crate::conic::ClarabelBackend);
        // the chain with γ = 1 cannot be certified (3 > 1); shrink radii
        let mut small = problem.clone();
        small.uncertainty.gamma_init = 0.1;
        small.uncertainty.gamma_dyn = 0.1;
        let cert = cert.or_else(|_| scr_solve(&small, &vec![dv(&[0.0]); 2], &ScrOptions::default(), &crate::conic::ClarabelBackend)).unwrap();
        assert!(matches!(monte_carlo_verify(&small, &cert, 0, 1), Err(ScrError::SamplesRequired)));
    }

    #[test]
    fn seed_derivation_is_stable() {
        let a = derive_seed(42, 7, 3);
        let b = derive_seed(42, 7, 3);
        assert_eq!(a, b);
        assert_ne!(derive_seed(42, 7, 4), a);
        assert_ne!(derive_seed(42, 8, 3), a);
    }

    #[test]
    fn ellipsoid_samples_stay_inside() {
        let sigma = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let factor = sigma_sqrt(&sigma);
        let inv = sigma.clone().try_inverse().unwrap();
        let center = dv(&[1.0, -2.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for i in 0..2000 {
            let w = sample_ellipsoid(&mut rng, &center, &factor, i % 2 == 1);
            let d = &w - &center;
            let q = d.dot(&(&inv * &d));
            assert!(q <= 1.0 + 1e-9, "quadratic form {q}");
            if i % 2 == 1 {
                assert!((q - 1.0).abs() < 1e-9, "boundary sample off the shell: {q}");
            }
        }
    }
}
