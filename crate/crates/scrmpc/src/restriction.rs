//! Assembly of the convex restriction.
//!
//! Given a model linearized at a nominal trajectory, this module builds the
//! convex program whose feasible points are certified robust: self-mapping
//! tube rows (which make the fixed-point operator map the tube into itself
//! for every disturbance), obstacle half-space rows (which keep the whole
//! tube outside every obstacle), the ellipsoid support terms, and the
//! worst-case cost epigraph.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::envelope::{vertex_bound_constraints, vertex_evaluations, EnvelopeError, EnvelopeSide, QuadraticEnvelope};
use crate::model::{EnvelopeParams, FeedbackModel, ModelError, ResidualEnvelope};
use crate::trajectory::TubeFaceMaps;

/// Eigenvalue tolerance for PSD validation of uncertainty blocks.
pub const PSD_TOL: f64 = 1e-12;
/// Minimum nominal-to-obstacle distance treated as "strictly outside".
pub const WITNESS_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RestrictionError {
    #[error("nominal state at stage {stage} is inside or on obstacle {obstacle}; the safety restriction is empty there")]
    NominalInsideObstacle { stage: usize, obstacle: usize },
    #[error("polytope obstacle is infeasible (empty intersection of half-spaces)")]
    InfeasiblePolytope,
    #[error("obstacle {obstacle}: {what} has dimension {got}, expected {expected}")]
    ObstacleDimension { obstacle: usize, what: &'static str, expected: usize, got: usize },
    #[error("uncertainty block {block} is not positive semidefinite (eigenvalue {eigenvalue:.3e})")]
    NotPsd { block: String, eigenvalue: f64 },
    #[error("uncertainty radius must be nonnegative, got {0}")]
    NegativeRadius(f64),
    #[error("cost weight {which} is not positive semidefinite (eigenvalue {eigenvalue:.3e})")]
    CostNotPsd { which: String, eigenvalue: f64 },
    #[error("control bounds: lower[{index}] = {lower} exceeds upper[{index}] = {upper}")]
    BoundsCrossed { index: usize, lower: f64, upper: f64 },
    #[error("{what} has {got} entries, expected {expected}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}

// ---------------------------------------------------------------------------
// tube

/// Per-stage bounds on the transformed state, the parameters of the
/// candidate self-mapping polytope.
#[derive(Debug, Clone)]
pub struct Tube {
    /// z^u_t for t = 0..=N.
    pub upper: Vec<DVector<f64>>,
    /// z^ℓ_t for t = 0..=N.
    pub lower: Vec<DVector<f64>>,
}

impl Tube {
    pub fn stages(&self) -> usize {
        self.upper.len()
    }

    pub fn is_ordered(&self) -> bool {
        self.upper
            .iter()
            .zip(self.lower.iter())
            .all(|(u, l)| u.iter().zip(l.iter()).all(|(a, b)| b <= a))
    }

    /// Containment of a transformed state at stage t (closed comparison).
    pub fn contains(&self, t: usize, z: &DVector<f64>) -> bool {
        let (u, l) = (&self.upper[t], &self.lower[t]);
        z.iter().enumerate().all(|(i, v)| l[i] <= *v && *v <= u[i])
    }

    /// Worst signed violation of the box at stage t (≤ 0 inside).
    pub fn violation(&self, t: usize, z: &DVector<f64>) -> f64 {
        let (u, l) = (&self.upper[t], &self.lower[t]);
        z.iter()
            .enumerate()
            .map(|(i, v)| (v - u[i]).max(l[i] - v))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

// ---------------------------------------------------------------------------
// uncertainty

/// Ellipsoidal uncertainty in the initial condition and per-stage dynamics,
/// each block with its own shape matrix and radius.
#[derive(Debug, Clone)]
pub struct UncertaintyModel {
    /// Shape of the initial-condition ellipsoid, n×n PSD.
    pub sigma_init: DMatrix<f64>,
    /// Shape of each stage disturbance ellipsoid, r×r PSD.
    pub sigma_stage: Vec<DMatrix<f64>>,
    pub gamma_init: f64,
    pub gamma_dyn: f64,
    /// Nominal initial condition (center of the init ellipsoid).
    pub w_init_nominal: DVector<f64>,
    /// Nominal per-stage disturbances (centers of the stage ellipsoids).
    pub w_nominal: Vec<DVector<f64>>,
}

/// Which blocks the margin variable scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportMode {
    /// Fixed radii folded in; the support term is a constant.
    FixedRadii,
    /// γ scales the initial-condition block only.
    MarginInit,
    /// γ scales the dynamics blocks only.
    MarginDynamics,
    /// γ scales every block.
    MarginJoint,
}

/// The support-function term ξ(γ) of the disturbance set along each tube
/// face, affine in the margin: `constant + γ·radius_coeff`.
#[derive(Debug, Clone)]
pub struct XiSupport {
    pub constant: DVector<f64>,
    pub radius_coeff: DVector<f64>,
}

impl XiSupport {
    pub fn eval(&self, gamma: f64) -> DVector<f64> {
        &self.constant + gamma * &self.radius_coeff
    }
}

impl UncertaintyModel {
    pub fn validate(&self, n: usize, r: usize, horizon: usize) -> Result<(), RestrictionError> {
        if self.gamma_init < 0.0 {
            return Err(RestrictionError::NegativeRadius(self.gamma_init));
        }
        if self.gamma_dyn < 0.0 {
            return Err(RestrictionError::NegativeRadius(self.gamma_dyn));
        }
        if self.sigma_init.nrows() != n || self.sigma_init.ncols() != n {
            return Err(RestrictionError::Shape { what: "initial-condition shape matrix", expected: n * n, got: self.sigma_init.len() });
        }
        if self.sigma_stage.len() != horizon {
            return Err(RestrictionError::Shape { what: "stage shape matrices", expected: horizon, got: self.sigma_stage.len() });
        }
        if self.w_init_nominal.len() != n {
            return Err(RestrictionError::Shape { what: "nominal initial condition", expected: n, got: self.w_init_nominal.len() });
        }
        if self.w_nominal.len() != horizon {
            return Err(RestrictionError::Shape { what: "nominal disturbances", expected: horizon, got: self.w_nominal.len() });
        }
        check_psd(&self.sigma_init, "init")?;
        for (t, s) in self.sigma_stage.iter().enumerate() {
            if s.nrows() != r || s.ncols() != r {
                return Err(RestrictionError::Shape { what: "stage shape matrix", expected: r * r, got: s.len() });
            }
            check_psd(s, &format!("stage {t}"))?;
        }
        Ok(())
    }

    /// Stacked nominal disturbance (w_init, w_0..w_{N−1}).
    pub fn stacked_nominal(&self) -> DVector<f64> {
        let n = self.w_init_nominal.len();
        let r = self.w_nominal.first().map_or(0, |w| w.len());
        let mut out = DVector::zeros(n + r * self.w_nominal.len());
        out.rows_mut(0, n).copy_from(&self.w_init_nominal);
        for (t, w) in self.w_nominal.iter().enumerate() {
            out.rows_mut(n + t * r, r).copy_from(w);
        }
        out
    }
}

fn check_psd(m: &DMatrix<f64>, block: &str) -> Result<(), RestrictionError> {
    let sym = 0.5 * (m + m.transpose());
    let asym = (m - m.transpose()).amax();
    let scale = 1.0 + m.amax();
    if asym > 1e-9 * scale {
        return Err(RestrictionError::NotPsd { block: format!("{block} (asymmetric)"), eigenvalue: asym });
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOL * scale {
        return Err(RestrictionError::NotPsd { block: block.to_string(), eigenvalue: min });
    }
    Ok(())
}

/// Exact support of the product uncertainty set along each face row:
/// `ξ_i = R_i w⁰ + γ·Σ_blocks √(R_{i,b} Σ_b R_{i,b}ᵀ)`, with the per-block
/// radii folded in when the mode fixes them.
pub fn xi_support(disturbance_gain: &DMatrix<f64>, uncertainty: &UncertaintyModel, mode: SupportMode) -> XiSupport {
    let n = uncertainty.w_init_nominal.len();
    let r = uncertainty.sigma_stage.first().map_or(0, |s| s.nrows());
    let w0 = uncertainty.stacked_nominal();
    let faces = disturbance_gain.nrows();
    let mut constant = DVector::zeros(faces);
    let mut radius_coeff = DVector::zeros(faces);

    let block_support = |seg: DVector<f64>, sigma: &DMatrix<f64>| -> f64 {
        let sv = sigma * &seg;
        seg.dot(&sv).max(0.0).sqrt()
    };

    for i in 0..faces {
        let row = disturbance_gain.row(i).transpose().into_owned();
        constant[i] = row.dot(&w0);
        let init_part = block_support(row.rows(0, n).into_owned(), &uncertainty.sigma_init);
        let mut dyn_part = 0.0;
        for (t, sigma) in uncertainty.sigma_stage.iter().enumerate() {
            dyn_part += block_support(row.rows(n + t * r, r).into_owned(), sigma);
        }
        radius_coeff[i] = match mode {
            SupportMode::FixedRadii => uncertainty.gamma_init * init_part + uncertainty.gamma_dyn * dyn_part,
            SupportMode::MarginInit => init_part,
            SupportMode::MarginDynamics => dyn_part,
            SupportMode::MarginJoint => init_part + dyn_part,
        };
    }
    XiSupport { constant, radius_coeff }
}

// ---------------------------------------------------------------------------
// obstacles and the safety restriction

#[derive(Debug, Clone)]
pub enum ObstacleShape {
    Ball { center: DVector<f64>, radius: f64 },
    Box { min: DVector<f64>, max: DVector<f64> },
    /// {y : A y ≤ b}
    Polytope { a: DMatrix<f64>, b: DVector<f64> },
}

/// A convex obstacle acting on a subset of state coordinates (the remaining
/// coordinates are unconstrained inside the obstacle).
#[derive(Debug, Clone)]
pub struct Obstacle {
    pub shape: ObstacleShape,
    /// State coordinate indices the shape constrains.
    pub coords: Vec<usize>,
}

impl Obstacle {
    pub fn full(shape: ObstacleShape, n: usize) -> Self {
        Self { shape, coords: (0..n).collect() }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    fn shape_dim(&self) -> usize {
        match &self.shape {
            ObstacleShape::Ball { center, .. } => center.len(),
            ObstacleShape::Box { min, .. } => min.len(),
            ObstacleShape::Polytope { a, .. } => a.ncols(),
        }
    }

    pub fn validate(&self, index: usize, n: usize) -> Result<(), RestrictionError> {
        if self.shape_dim() != self.coords.len() {
            return Err(RestrictionError::ObstacleDimension { obstacle: index, what: "shape", expected: self.coords.len(), got: self.shape_dim() });
        }
        if let Some(c) = self.coords.iter().find(|c| **c >= n) {
            return Err(RestrictionError::ObstacleDimension { obstacle: index, what: "coordinate index", expected: n, got: *c });
        }
        match &self.shape {
            ObstacleShape::Ball { radius, .. } => {
                if *radius < 0.0 {
                    Err(RestrictionError::NegativeRadius(*radius))
                } else {
                    Ok(())
                }
            }
            ObstacleShape::Box { min, max } => {
                if min.iter().zip(max.iter()).any(|(lo, hi)| lo > hi) {
                    Err(RestrictionError::InfeasiblePolytope)
                } else {
                    Ok(())
                }
            }
            // nonemptiness pre-check via one projection solve
            ObstacleShape::Polytope { a, .. } => project_polytope(&DVector::zeros(a.ncols()), &self.shape).map(|_| ()),
        }
    }

    fn sub(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.coords.len(), self.coords.iter().map(|c| x[*c]))
    }

    /// Closed-set membership.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        let y = self.sub(x);
        match &self.shape {
            ObstacleShape::Ball { center, radius } => (y - center).norm() <= *radius,
            ObstacleShape::Box { min, max } => y.iter().enumerate().all(|(i, v)| min[i] <= *v && *v <= max[i]),
            ObstacleShape::Polytope { a, b } => {
                let res = a * y - b;
                res.iter().all(|v| *v <= 1e-12)
            }
        }
    }

    /// Signed distance surrogate used in diagnostics: Euclidean distance from
    /// x to the obstacle (0 when inside).
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        let y = self.sub(x);
        let p = project_shape(&y, &self.shape).unwrap_or_else(|_| y.clone());
        (y - p).norm()
    }
}

fn project_halfspace(y: &DVector<f64>, a: &DVector<f64>, b: f64) -> DVector<f64> {
    let val = a.dot(y);
    if val <= b {
        return y.clone();
    }
    y - (val - b) / a.norm_squared() * a
}

/// Dykstra's alternating projections onto the defining half-spaces; detects
/// empty intersections by a residual that refuses to vanish.
fn project_polytope(y: &DVector<f64>, shape: &ObstacleShape) -> Result<DVector<f64>, RestrictionError> {
    let ObstacleShape::Polytope { a, b } = shape else { unreachable!() };
    let rows = a.nrows();
    if rows == 0 {
        return Ok(y.clone());
    }
    let normals: Vec<DVector<f64>> = (0..rows).map(|j| a.row(j).transpose().into_owned()).collect();
    let mut x = y.clone();
    let mut corrections = vec![DVector::zeros(y.len()); rows];
    let mut last_move = f64::INFINITY;
    for _ in 0..20_000 {
        last_move = 0.0;
        for j in 0..rows {
            let x_in = &x + &corrections[j];
            let x_new = project_halfspace(&x_in, &normals[j], b[j]);
            corrections[j] = &x_in - &x_new;
            last_move = last_move.max((&x_new - &x).amax());
            x = x_new;
        }
        if last_move < 1e-13 * (1.0 + x.amax()) {
            break;
        }
    }
    let violation = (a * &x - b).max();
    if violation > 1e-7 * (1.0 + x.amax()) || !last_move.is_finite() {
        return Err(RestrictionError::InfeasiblePolytope);
    }
    Ok(x)
}

fn project_shape(y: &DVector<f64>, shape: &ObstacleShape) -> Result<DVector<f64>, RestrictionError> {
    match shape {
        ObstacleShape::Ball { center, radius } => {
            let d = y - center;
            let norm = d.norm();
            if norm <= *radius {
                Ok(y.clone())
            } else {
                Ok(center + (*radius / norm) * d)
            }
        }
        ObstacleShape::Box { min, max } => Ok(DVector::from_iterator(
            y.len(),
            y.iter().enumerate().map(|(i, v)| v.clamp(min[i], max[i])),
        )),
        ObstacleShape::Polytope { .. } => project_polytope(y, shape),
    }
}

/// Euclidean projection of a state onto an obstacle: the witness point used
/// by the safety restriction. Coordinates outside the obstacle's subset are
/// unchanged (they are free inside the obstacle).
pub fn project_to_obstacle(point: &DVector<f64>, obstacle: &Obstacle) -> Result<DVector<f64>, RestrictionError> {
    let sub = obstacle.sub(point);
    let proj = project_shape(&sub, &obstacle.shape)?;
    let mut out = point.clone();
    for (k, c) in obstacle.coords.iter().enumerate() {
        out[*c] = proj[k];
    }
    Ok(out)
}

/// Per-stage obstacle lists, index t = 0..=N (stage 0 carries no safety rows;
/// the initial state is the uncertain datum, not a decision).
#[derive(Debug, Clone)]
pub struct ObstacleSet {
    pub per_stage: Vec<Vec<Obstacle>>,
}

impl ObstacleSet {
    pub fn time_invariant(obstacles: Vec<Obstacle>, horizon: usize) -> Self {
        Self { per_stage: vec![obstacles; horizon + 1] }
    }

    pub fn max_per_stage(&self) -> usize {
        self.per_stage.iter().map(|v| v.len()).max().unwrap_or(0)
    }

    pub fn validate(&self, n: usize) -> Result<(), RestrictionError> {
        for stage in &self.per_stage {
            for (i, o) in stage.iter().enumerate() {
                o.validate(i, n)?;
            }
        }
        Ok(())
    }

    /// First obstacle containing x at stage t, if any.
    pub fn hit(&self, t: usize, x: &DVector<f64>) -> Option<usize> {
        self.per_stage[t].iter().position(|o| o.contains(x))
    }
}

/// Half-space restriction keeping states out of every obstacle: rows
/// `L_t C_t x + d_t < 0` built from the witness points.
#[derive(Debug, Clone)]
pub struct StageSafety {
    /// s_t×q row matrix acting on z_t.
    pub rows: DMatrix<f64>,
    pub offsets: DVector<f64>,
    pub witnesses: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct SafetyRestriction {
    /// Index st = 0.. maps to stage t = st + 1.
    pub stages: Vec<StageSafety>,
}

impl SafetyRestriction {
    pub fn rows_total(&self) -> usize {
        self.stages.iter().map(|s| s.rows.nrows()).sum()
    }
}

/// Build the safety half-spaces around the nominal states: for each stage
/// t = 1..=N and obstacle i, the witness `b` is the obstacle point closest to
/// the nominal state and the row reads `(b − x⁰)ᵀ C† C x + (x⁰ − b)ᵀ b < 0`.
pub fn safety_halfspaces(
    model: &FeedbackModel,
    nominal_x: &[DVector<f64>],
    obstacles: &ObstacleSet,
) -> Result<SafetyRestriction, RestrictionError> {
    let horizon = model.horizon();
    let q = model.dims().q;
    let mut stages = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let x0 = &nominal_x[t];
        let list = &obstacles.per_stage[t];
        let mut rows = DMatrix::zeros(list.len(), q);
        let mut offsets = DVector::zeros(list.len());
        let mut witnesses = Vec::with_capacity(list.len());
        for (i, obstacle) in list.iter().enumerate() {
            let b = project_to_obstacle(x0, obstacle)?;
            let gap = x0 - &b;
            if gap.norm() <= WITNESS_TOL {
                return Err(RestrictionError::NominalInsideObstacle { stage: t, obstacle: i });
            }
            let l_row = (&b - x0).transpose() * model.c_pinv(t);
            rows.row_mut(i).copy_from(&l_row);
            offsets[i] = gap.dot(&b);
            witnesses.push(b);
        }
        stages.push(StageSafety { rows, offsets, witnesses });
    }
    Ok(SafetyRestriction { stages })
}

// ---------------------------------------------------------------------------
// cost factors and control bounds

/// Stage cost weights supplied as square-root factors, so positive
/// semidefiniteness holds by construction.
#[derive(Debug, Clone)]
pub struct CostFactors {
    /// Q_t^{1/2}, one per stage t = 0..N−1.
    pub q_sqrt: Vec<DMatrix<f64>>,
    /// Terminal Q_N^{1/2}.
    pub q_sqrt_terminal: DMatrix<f64>,
    /// R_t^{1/2}, one per stage.
    pub r_sqrt: Vec<DMatrix<f64>>,
}

impl CostFactors {
    /// Time-invariant factors.
    pub fn time_invariant(q_sqrt: DMatrix<f64>, r_sqrt: DMatrix<f64>, horizon: usize) -> Self {
        Self {
            q_sqrt: vec![q_sqrt.clone(); horizon],
            q_sqrt_terminal: q_sqrt,
            r_sqrt: vec![r_sqrt; horizon],
        }
    }

    /// Build factors from full weight matrices, validating semidefiniteness.
    pub fn from_weights(q: &DMatrix<f64>, q_terminal: &DMatrix<f64>, r: &DMatrix<f64>, horizon: usize) -> Result<Self, RestrictionError> {
        Ok(Self {
            q_sqrt: vec![psd_sqrt(q, "state weight")?; horizon],
            q_sqrt_terminal: psd_sqrt(q_terminal, "terminal weight")?,
            r_sqrt: vec![psd_sqrt(r, "control weight")?; horizon],
        })
    }

    pub fn q_sqrt_at(&self, t: usize) -> &DMatrix<f64> {
        if t == self.q_sqrt.len() {
            &self.q_sqrt_terminal
        } else {
            &self.q_sqrt[t]
        }
    }

    /// ½Σ(xᵀQx + uᵀRu) + ½x_NᵀQ_Nx_N along a trajectory.
    pub fn trajectory_cost(&self, x: &[DVector<f64>], u: &[DVector<f64>]) -> f64 {
        let horizon = self.q_sqrt.len();
        let mut total = 0.0;
        for t in 0..horizon {
            total += 0.5 * (&self.q_sqrt[t] * &x[t]).norm_squared();
            total += 0.5 * (&self.r_sqrt[t] * &u[t]).norm_squared();
        }
        total += 0.5 * (&self.q_sqrt_terminal * &x[horizon]).norm_squared();
        total
    }
}

fn psd_sqrt(m: &DMatrix<f64>, which: &str) -> Result<DMatrix<f64>, RestrictionError> {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-10 * (1.0 + m.amax()) {
        return Err(RestrictionError::CostNotPsd { which: which.to_string(), eigenvalue: min });
    }
    let lam_sqrt = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    Ok(DMatrix::from_diagonal(&lam_sqrt) * eig.eigenvectors.transpose())
}

/// Per-input control limits, applied at every stage.
#[derive(Debug, Clone)]
pub struct ControlBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ControlBounds {
    pub fn unbounded(m: usize) -> Self {
        Self { lower: DVector::from_element(m, f64::NEG_INFINITY), upper: DVector::from_element(m, f64::INFINITY) }
    }

    pub fn validate(&self) -> Result<(), RestrictionError> {
        for i in 0..self.lower.len() {
            if self.lower[i] > self.upper[i] {
                return Err(RestrictionError::BoundsCrossed { index: i, lower: self.lower[i], upper: self.upper[i] });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(u.len(), u.iter().enumerate().map(|(i, v)| v.clamp(self.lower[i], self.upper[i])))
    }
}

// ---------------------------------------------------------------------------
// program assembly

/// Variable layout of the assembled program, in canonical order:
/// u, z^u, z^ℓ, residual bound pairs, cost auxiliaries, cost upper bound,
/// optional margin.
#[derive(Debug, Clone)]
pub struct VarLayout {
    pub horizon: usize,
    pub state_q: usize,
    pub control_m: usize,
    pub u_offset: usize,
    pub zu_offset: usize,
    pub zl_offset: usize,
    pub env: Vec<EnvSlot>,
    pub y_offsets: Vec<usize>,
    pub y_rows: Vec<usize>,
    pub cost_var: Option<usize>,
    pub gamma_var: Option<usize>,
    pub total: usize,
}

/// One tracked residual component: its bound-variable pair and where it sits
/// in the stacked residual vector.
#[derive(Debug, Clone)]
pub struct EnvSlot {
    pub stage: usize,
    pub component: usize,
    /// Column in the stacked residual (n + stage·p + component).
    pub column: usize,
    pub upper_var: usize,
    pub lower_var: usize,
    pub envelope: QuadraticEnvelope,
}

impl VarLayout {
    pub fn u_var(&self, t: usize, j: usize) -> usize {
        self.u_offset + t * self.control_m + j
    }
    pub fn zu_var(&self, t: usize, i: usize) -> usize {
        self.zu_offset + t * self.state_q + i
    }
    pub fn zl_var(&self, t: usize, i: usize) -> usize {
        self.zl_offset + t * self.state_q + i
    }

    /// Human-readable names, index-aligned with the variables.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.total];
        for t in 0..self.horizon {
            for j in 0..self.control_m {
                names[self.u_var(t, j)] = format!("u[{t}][{j}]");
            }
        }
        for t in 0..=self.horizon {
            for i in 0..self.state_q {
                names[self.zu_var(t, i)] = format!("z_upper[{t}][{i}]");
                names[self.zl_var(t, i)] = format!("z_lower[{t}][{i}]");
            }
        }
        for slot in &self.env {
            names[slot.upper_var] = format!("g_upper[{}][{}]", slot.stage, slot.component);
            names[slot.lower_var] = format!("g_lower[{}][{}]", slot.stage, slot.component);
        }
        for (t, (off, rows)) in self.y_offsets.iter().zip(self.y_rows.iter()).enumerate() {
            for j in 0..*rows {
                names[off + j] = format!("y[{t}][{j}]");
            }
        }
        if let Some(c) = self.cost_var {
            names[c] = "cost_upper".to_string();
        }
        if let Some(g) = self.gamma_var {
            names[g] = "margin".to_string();
        }
        names
    }
}

/// Row classification for diagnostics and the constraint census.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowKind {
    SelfMapUpper { stage: usize, coord: usize },
    SelfMapLower { stage: usize, coord: usize },
    Safety { stage: usize, obstacle: usize },
    EnvelopeUpper { stage: usize, component: usize, vertex: usize },
    EnvelopeLower { stage: usize, component: usize, vertex: usize },
    CostAbs { stage: usize, row: usize, negated: bool },
    CostEpigraph,
    ControlFix { stage: usize, input: usize },
}

impl RowKind {
    pub fn label(&self) -> String {
        match self {
            RowKind::SelfMapUpper { stage, coord } => format!("self_map_upper[{stage}][{coord}]"),
            RowKind::SelfMapLower { stage, coord } => format!("self_map_lower[{stage}][{coord}]"),
            RowKind::Safety { stage, obstacle } => format!("safety[{stage}][{obstacle}]"),
            RowKind::EnvelopeUpper { stage, component, vertex } => format!("envelope_upper[{stage}][{component}]@{vertex}"),
            RowKind::EnvelopeLower { stage, component, vertex } => format!("envelope_lower[{stage}][{component}]@{vertex}"),
            RowKind::CostAbs { stage, row, negated } => format!("cost_abs[{stage}][{row}]{}", if *negated { "-" } else { "+" }),
            RowKind::CostEpigraph => "cost_epigraph".to_string(),
            RowKind::ControlFix { stage, input } => format!("control_fix[{stage}][{input}]"),
        }
    }
}

/// One constraint: `½vᵀQv + aᵀv ≤ rhs` (quadratic part optional), or an
/// equality when flagged.
#[derive(Debug, Clone)]
pub struct Row {
    pub kind: RowKind,
    pub linear: Vec<(usize, f64)>,
    pub quad: Vec<(usize, usize, f64)>,
    pub rhs: f64,
}

/// Emitted row counts by category, with the scalability bound they must obey:
/// `n(N+1)·2^{|I|+1} + 2q(N+1) + sN` for the restriction categories.
#[derive(Debug, Clone, Serialize, Default)]
pub struct ConstraintCensus {
    pub self_map: usize,
    pub safety: usize,
    pub envelope: usize,
    pub cost: usize,
    pub control_fix: usize,
    pub restriction_total: usize,
    pub bound: usize,
}

impl ConstraintCensus {
    pub fn scalability_bound(n: usize, q: usize, s: usize, sparsity_degree: usize, horizon: usize) -> usize {
        n * (horizon + 1) * (1usize << (sparsity_degree + 1)) + 2 * q * (horizon + 1) + s * horizon
    }

    pub fn within_bound(&self) -> bool {
        self.restriction_total <= self.bound
    }
}

/// What the program optimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum ProgramPurpose {
    /// Minimize the worst-case cost bound over the tube.
    MinimizeWorstCost,
    /// Maximize the uncertainty margin at fixed controls.
    MaximizeMargin(SupportMode),
}

/// The assembled restriction before canonicalization.
#[derive(Debug, Clone)]
pub struct RestrictionProgram {
    pub layout: VarLayout,
    pub inequalities: Vec<Row>,
    pub equalities: Vec<Row>,
    /// Per-variable (lower, upper); ±∞ when free.
    pub bounds: Vec<(f64, f64)>,
    pub objective_linear: Vec<(usize, f64)>,
    pub objective_quad: Vec<(usize, usize, f64)>,
    pub minimize: bool,
    pub purpose: ProgramPurpose,
    pub census: ConstraintCensus,
}

/// Everything the assembler needs, borrowed from the caller.
pub struct RestrictionContext<'a> {
    pub model: &'a FeedbackModel,
    pub maps: &'a TubeFaceMaps,
    pub uncertainty: &'a UncertaintyModel,
    pub safety: &'a SafetyRestriction,
    pub cost: &'a CostFactors,
    pub control_bounds: &'a ControlBounds,
    pub envelope_params: &'a EnvelopeParams,
    /// Safety rows are emitted as ≤ −eps_safe (strict inequality surrogate).
    pub eps_safe: f64,
    /// Self-map rows are emitted as ≤ z̃ − eps_tube so solver feasibility
    /// slack cannot leak trajectories through a face.
    pub eps_tube: f64,
}

/// Assemble the full convex restriction around the registered nominal.
pub fn assemble(ctx: &RestrictionContext, purpose: ProgramPurpose) -> Result<RestrictionProgram, RestrictionError> {
    let model = ctx.model;
    let dims = model.dims();
    let horizon = model.horizon();
    let nominal = model.nominal()?;
    ctx.control_bounds.validate()?;
    ctx.uncertainty.validate(dims.n, dims.r, horizon)?;

    // --- envelope slots ------------------------------------------------------
    // residuals that are exactly affine (upper == lower, no curvature) are
    // substituted into the self-map rows instead of getting bound variables;
    // that substitution is exact and avoids degenerate variable pinning
    let mut env = Vec::new();
    let mut exact_affine: Vec<(usize, usize, QuadraticEnvelope)> = Vec::new();
    for t in 0..horizon {
        for k in 0..dims.p {
            match model.residual_envelope(t, k, ctx.envelope_params)? {
                ResidualEnvelope::Zero => {}
                ResidualEnvelope::Pair(envelope) => {
                    envelope.validate()?;
                    let column = dims.n + t * dims.p + k;
                    if envelope.upper.is_purely_linear()
                        && envelope.lower.is_purely_linear()
                        && envelope.upper == envelope.lower
                        && envelope.z_vars.is_empty()
                    {
                        exact_affine.push((column, t, envelope));
                    } else {
                        env.push((t, k, envelope));
                    }
                }
            }
        }
    }

    // --- layout --------------------------------------------------------------
    let margin_mode = match &purpose {
        ProgramPurpose::MaximizeMargin(mode) => Some(*mode),
        ProgramPurpose::MinimizeWorstCost => None,
    };
    let mut next = 0usize;
    let u_offset = next;
    next += dims.m * horizon;
    let zu_offset = next;
    next += dims.q * (horizon + 1);
    let zl_offset = next;
    next += dims.q * (horizon + 1);
    let env_slots: Vec<EnvSlot> = env
        .into_iter()
        .map(|(stage, component, envelope)| {
            let upper_var = next;
            let lower_var = next + 1;
            next += 2;
            EnvSlot { stage, component, column: dims.n + stage * dims.p + component, upper_var, lower_var, envelope }
        })
        .collect();
    let mut y_offsets = Vec::new();
    let mut y_rows = Vec::new();
    let mut cost_var = None;
    if margin_mode.is_none() {
        for t in 0..=horizon {
            y_offsets.push(next);
            let rows = ctx.cost.q_sqrt_at(t).nrows();
            y_rows.push(rows);
            next += rows;
        }
        cost_var = Some(next);
        next += 1;
    }
    let gamma_var = margin_mode.map(|_| {
        let v = next;
        next += 1;
        v
    });
    let layout = VarLayout {
        horizon,
        state_q: dims.q,
        control_m: dims.m,
        u_offset,
        zu_offset,
        zl_offset,
        env: env_slots,
        y_offsets,
        y_rows,
        cost_var,
        gamma_var,
        total: next,
    };

    // --- bounds ---------------------------------------------------------------
    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); layout.total];
    if margin_mode.is_none() {
        for t in 0..horizon {
            for j in 0..dims.m {
                bounds[layout.u_var(t, j)] = (ctx.control_bounds.lower[j], ctx.control_bounds.upper[j]);
            }
        }
    }
    if let Some(g) = layout.gamma_var {
        bounds[g] = (0.0, f64::INFINITY);
    }

    let mut inequalities = Vec::new();
    let mut equalities = Vec::new();
    let mut census = ConstraintCensus::default();

    // --- envelope vertex rows ---------------------------------------------------
    for slot in &layout.env {
        let zu_ids: Vec<usize> = slot.envelope.z_vars.iter().map(|i| layout.zu_var(slot.stage, *i)).collect();
        let zl_ids: Vec<usize> = slot.envelope.z_vars.iter().map(|i| layout.zl_var(slot.stage, *i)).collect();
        let u_ids: Vec<usize> = slot.envelope.u_vars.iter().map(|j| layout.u_var(slot.stage, *j)).collect();
        for (side, var, upper) in [
            (EnvelopeSide::Upper, slot.upper_var, true),
            (EnvelopeSide::Lower, slot.lower_var, false),
        ] {
            let cons = vertex_bound_constraints(&slot.envelope, side, &zu_ids, &zl_ids, &u_ids, var)?;
            for c in cons {
                let kind = if upper {
                    RowKind::EnvelopeUpper { stage: slot.stage, component: slot.component, vertex: c.vertex }
                } else {
                    RowKind::EnvelopeLower { stage: slot.stage, component: slot.component, vertex: c.vertex }
                };
                inequalities.push(Row { kind, linear: c.linear, quad: c.quad, rhs: c.rhs });
                census.envelope += 1;
            }
        }
    }

    // --- self-map rows ------------------------------------------------------------
    let mode = margin_mode.unwrap_or(SupportMode::FixedRadii);
    let xi = xi_support(&ctx.maps.disturbance_gain, ctx.uncertainty, mode);
    let z_len = dims.q * (horizon + 1);
    for face in 0..2 * z_len {
        let mut linear: Vec<(usize, f64)> = Vec::new();
        let mut exact_shift = 0.0;
        for slot in &layout.env {
            let kp = ctx.maps.residual_gain_pos[(face, slot.column)];
            if kp != 0.0 {
                linear.push((slot.upper_var, kp));
            }
            let kn = ctx.maps.residual_gain_neg[(face, slot.column)];
            if kn != 0.0 {
                linear.push((slot.lower_var, kn));
            }
        }
        // exact affine residuals substitute in with the full gain (upper and
        // lower estimators coincide)
        for (column, stage, envelope) in &exact_affine {
            let k = ctx.maps.residual_gain[(face, *column)];
            if k == 0.0 {
                continue;
            }
            exact_shift += k * envelope.upper.c;
            for (local, j) in envelope.u_vars.iter().enumerate() {
                let coeff = k * envelope.upper.a[local];
                if coeff != 0.0 {
                    linear.push((layout.u_var(*stage, *j), coeff));
                }
            }
        }
        let (kind, tube_var) = if face < z_len {
            let (stage, coord) = (face / dims.q, face % dims.q);
            (RowKind::SelfMapUpper { stage, coord }, (layout.zu_var(stage, coord), -1.0))
        } else {
            let local = face - z_len;
            let (stage, coord) = (local / dims.q, local % dims.q);
            (RowKind::SelfMapLower { stage, coord }, (layout.zl_var(stage, coord), 1.0))
        };
        linear.push(tube_var);
        let mut rhs = -xi.constant[face] - ctx.eps_tube - exact_shift;
        match margin_mode {
            // margin is a variable: move its coefficient to the left side
            Some(_) => {
                if xi.radius_coeff[face] != 0.0 {
                    linear.push((layout.gamma_var.unwrap(), xi.radius_coeff[face]));
                }
            }
            // radii fixed: the support is a constant
            None => rhs -= xi.radius_coeff[face],
        }
        inequalities.push(Row { kind, linear, quad: vec![], rhs });
        census.self_map += 1;
    }

    // --- safety rows -----------------------------------------------------------------
    for (st, stage_safety) in ctx.safety.stages.iter().enumerate() {
        let t = st + 1;
        for j in 0..stage_safety.rows.nrows() {
            let mut linear = Vec::new();
            for i in 0..dims.q {
                let l = stage_safety.rows[(j, i)];
                if l > 0.0 {
                    linear.push((layout.zu_var(t, i), l));
                } else if l < 0.0 {
                    linear.push((layout.zl_var(t, i), l));
                }
            }
            inequalities.push(Row {
                kind: RowKind::Safety { stage: t, obstacle: j },
                linear,
                quad: vec![],
                rhs: -stage_safety.offsets[j] - ctx.eps_safe,
            });
            census.safety += 1;
        }
    }

    // --- objective / cost epigraph ------------------------------------------------------
    let mut objective_linear = Vec::new();
    let objective_quad = Vec::new();
    let minimize;
    match margin_mode {
        Some(_) => {
            // maximize γ with controls pinned to the nominal
            minimize = false;
            objective_linear.push((layout.gamma_var.unwrap(), 1.0));
            for t in 0..horizon {
                for j in 0..dims.m {
                    equalities.push(Row {
                        kind: RowKind::ControlFix { stage: t, input: j },
                        linear: vec![(layout.u_var(t, j), 1.0)],
                        quad: vec![],
                        rhs: nominal.u[t][j],
                    });
                    census.control_fix += 1;
                }
            }
        }
        None => {
            minimize = true;
            let cu = layout.cost_var.unwrap();
            objective_linear.push((cu, 1.0));

            // absolute-value epigraph rows per stage and weighted row
            for t in 0..=horizon {
                let a = ctx.cost.q_sqrt_at(t) * model.c_pinv(t);
                for j in 0..a.nrows() {
                    let y_var = layout.y_offsets[t] + j;
                    let mut pos_row = Vec::new();
                    let mut neg_row = Vec::new();
                    for i in 0..dims.q {
                        let v = a[(j, i)];
                        if v > 0.0 {
                            pos_row.push((layout.zu_var(t, i), v));
                            neg_row.push((layout.zl_var(t, i), -v));
                        } else if v < 0.0 {
                            pos_row.push((layout.zl_var(t, i), v));
                            neg_row.push((layout.zu_var(t, i), -v));
                        }
                    }
                    pos_row.push((y_var, -1.0));
                    neg_row.push((y_var, -1.0));
                    inequalities.push(Row { kind: RowKind::CostAbs { stage: t, row: j, negated: false }, linear: pos_row, quad: vec![], rhs: 0.0 });
                    inequalities.push(Row { kind: RowKind::CostAbs { stage: t, row: j, negated: true }, linear: neg_row, quad: vec![], rhs: 0.0 });
                    census.cost += 2;
                }
            }

            // ½(Σ yᵀy + uᵀRu) + ½y_Nᵀy_N ≤ c_u
            let mut quad = Vec::new();
            for t in 0..=horizon {
                for j in 0..layout.y_rows[t] {
                    let y_var = layout.y_offsets[t] + j;
                    quad.push((y_var, y_var, 1.0));
                }
            }
            for t in 0..horizon {
                let r_t = ctx.cost.r_sqrt[t].transpose() * &ctx.cost.r_sqrt[t];
                for i in 0..dims.m {
                    for j in i..dims.m {
                        let v = r_t[(i, j)];
                        if v != 0.0 {
                            quad.push((layout.u_var(t, i), layout.u_var(t, j), v));
                        }
                    }
                }
            }
            inequalities.push(Row { kind: RowKind::CostEpigraph, linear: vec![(cu, -1.0)], quad, rhs: 0.0 });
            census.cost += 1;
        }
    }

    census.restriction_total = census.self_map + census.safety + census.envelope;
    census.bound = ConstraintCensus::scalability_bound(
        dims.n,
        dims.q,
        ctx.safety.stages.iter().map(|s| s.rows.nrows()).max().unwrap_or(0),
        model.sparsity_degree(),
        horizon,
    );

    Ok(RestrictionProgram {
        layout,
        inequalities,
        equalities,
        bounds,
        objective_linear,
        objective_quad,
        minimize,
        purpose,
        census,
    })
}

// ---------------------------------------------------------------------------
// exact certificate re-check

/// Exact algebraic re-validation of a certificate, independent of the solver:
/// recomputes envelope vertex extremes over the numeric tube, the face sums,
/// the safety rows, and the worst-case cost.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateCheck {
    pub min_selfmap_slack: f64,
    pub min_safety_slack: f64,
    pub tube_ordered: bool,
    pub exact_cost_upper: f64,
}

impl CertificateCheck {
    pub fn is_valid(&self) -> bool {
        self.min_selfmap_slack >= 0.0 && self.min_safety_slack > 0.0 && self.tube_ordered
    }
}

/// Re-derive every restriction quantity at a solved point. `u` are the
/// controls, `tube` the solved bounds; uncertainty enters with fixed radii.
pub fn recheck_certificate(
    ctx: &RestrictionContext,
    tube: &Tube,
    u: &[DVector<f64>],
) -> Result<CertificateCheck, RestrictionError> {
    let model = ctx.model;
    let dims = model.dims();
    let horizon = model.horizon();

    // exact residual bounds per stacked column
    let cols = dims.n + dims.p * horizon;
    let mut g_upper = DVector::zeros(cols);
    let mut g_lower = DVector::zeros(cols);
    for t in 0..horizon {
        for k in 0..dims.p {
            let column = dims.n + t * dims.p + k;
            match model.residual_envelope(t, k, ctx.envelope_params)? {
                ResidualEnvelope::Zero => {}
                ResidualEnvelope::Pair(env) => {
                    let z_lo = DVector::from_iterator(env.z_vars.len(), env.z_vars.iter().map(|i| tube.lower[t][*i]));
                    let z_hi = DVector::from_iterator(env.z_vars.len(), env.z_vars.iter().map(|i| tube.upper[t][*i]));
                    let u_sel = DVector::from_iterator(env.u_vars.len(), env.u_vars.iter().map(|j| u[t][*j]));
                    let ups = vertex_evaluations(&env, EnvelopeSide::Upper, &z_lo, &z_hi, &u_sel);
                    let los = vertex_evaluations(&env, EnvelopeSide::Lower, &z_lo, &z_hi, &u_sel);
                    g_upper[column] = ups.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    g_lower[column] = los.iter().cloned().fold(f64::INFINITY, f64::min);
                }
            }
        }
    }

    // face sums against the tube
    let xi = xi_support(&ctx.maps.disturbance_gain, ctx.uncertainty, SupportMode::FixedRadii);
    let z_len = dims.q * (horizon + 1);
    let mut min_selfmap_slack = f64::INFINITY;
    for face in 0..2 * z_len {
        let mut lhs = xi.constant[face] + xi.radius_coeff[face];
        for col in 0..cols {
            let kp = ctx.maps.residual_gain_pos[(face, col)];
            if kp != 0.0 {
                lhs += kp * g_upper[col];
            }
            let kn = ctx.maps.residual_gain_neg[(face, col)];
            if kn != 0.0 {
                lhs += kn * g_lower[col];
            }
        }
        let target = if face < z_len {
            tube.upper[face / dims.q][face % dims.q]
        } else {
            let local = face - z_len;
            -tube.lower[local / dims.q][local % dims.q]
        };
        min_selfmap_slack = min_selfmap_slack.min(target - lhs);
    }

    // safety rows over the tube
    let mut min_safety_slack = f64::INFINITY;
    for (st, stage_safety) in ctx.safety.stages.iter().enumerate() {
        let t = st + 1;
        for j in 0..stage_safety.rows.nrows() {
            let mut lhs = stage_safety.offsets[j];
            for i in 0..dims.q {
                let l = stage_safety.rows[(j, i)];
                lhs += if l > 0.0 { l * tube.upper[t][i] } else { l * tube.lower[t][i] };
            }
            min_safety_slack = min_safety_slack.min(-lhs);
        }
    }

    // exact worst-case cost over the tube
    let mut exact_cost_upper = 0.0;
    for t in 0..=horizon {
        let a = ctx.cost.q_sqrt_at(t) * model.c_pinv(t);
        let mut y_sq = 0.0;
        for j in 0..a.nrows() {
            let mut hi = 0.0;
            let mut lo = 0.0;
            for i in 0..dims.q {
                let v = a[(j, i)];
                if v > 0.0 {
                    hi += v * tube.upper[t][i];
                    lo += v * tube.lower[t][i];
                } else if v < 0.0 {
                    hi += v * tube.lower[t][i];
                    lo += v * tube.upper[t][i];
                }
            }
            let y = hi.max(-lo).max(0.0);
            y_sq += y * y;
        }
        exact_cost_upper += 0.5 * y_sq;
        if t < horizon {
            exact_cost_upper += 0.5 * (&ctx.cost.r_sqrt[t] * &u[t]).norm_squared();
        }
    }

    Ok(CertificateCheck {
        min_selfmap_slack,
        min_safety_slack,
        tube_ordered: tube.is_ordered(),
        exact_cost_upper,
    })
}
