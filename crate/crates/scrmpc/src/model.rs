//! Discrete-time systems in nonlinear feedback form.
//!
//! Dynamics are supplied factored as `f_t(x, u) = M_t ψ_t(C_t x, u)` with a
//! constant disturbance input `B_t w`. The basis `ψ` is a list of primitive
//! terms (linear, bilinear, trig, amplitude×trig), each of which knows its
//! exact dependency set, its analytic Jacobian, and how to build a concave
//! envelope pair for its residual after the nominal linearization is
//! subtracted.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::{
    amplitude_trig_envelope, bilinear_envelope, cos_envelope, sin_envelope, EnvelopeError,
    QuadraticEnvelope, QuadraticForm, TrigKind,
};

/// Relative singular-value tolerance for the rank condition on `C_t`.
pub const RANK_TOL: f64 = 1e-10;
/// Nominal rollout consistency tolerance.
pub const NOMINAL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("stage {stage}: {field} has dimensions {got:?}, expected {expected:?}")]
    DimensionMismatch { stage: usize, field: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("horizon must have at least one stage")]
    HorizonTooShort,
    #[error("stage {stage}: state transform is rank deficient (sigma_min/sigma_max = {ratio:.3e})")]
    RankDeficient { stage: usize, ratio: f64 },
    #[error("stage {stage}: basis term {term} references coordinate {index} outside range {bound}")]
    TermIndexOutOfRange { stage: usize, term: usize, index: usize, bound: usize },
    #[error("stage {stage}: amplitude×trig term {term} needs two distinct coordinates")]
    DegenerateAmpTrig { stage: usize, term: usize },
    #[error("no nominal point registered")]
    NominalMissing,
    #[error("nominal point inconsistent at stage {stage}: rollout mismatch {error:.3e}")]
    NominalInconsistent { stage: usize, error: f64 },
    #[error("nominal trajectory length {got} does not match horizon ({expected})")]
    NominalLength { expected: usize, got: usize },
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("stage index {0} out of range (horizon {1})")]
    StageOutOfRange(usize, usize),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}

/// Problem dimensions: state n, control m, basis p, transformed state q,
/// disturbance r.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
}

/// One primitive basis component ψ_k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisTerm {
    /// Σ c_j z_j — linear in the transformed state; residual is identically zero.
    LinearZ { coeffs: Vec<(usize, f64)> },
    /// Σ c_j u_j — linear in the control; residual equals the term itself.
    LinearU { coeffs: Vec<(usize, f64)> },
    /// A constant component.
    Constant { value: f64 },
    /// z_i·z_j (i == j gives the square).
    Bilinear { i: usize, j: usize },
    /// sin z_i.
    Sin { i: usize },
    /// cos z_i.
    Cos { i: usize },
    /// z_amp · trig(z_angle), e.g. speed times heading cosine.
    AmpTrig { amp: usize, angle: usize, trig: Trig },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trig {
    Sin,
    Cos,
}

impl From<Trig> for TrigKind {
    fn from(t: Trig) -> TrigKind {
        match t {
            Trig::Sin => TrigKind::Sin,
            Trig::Cos => TrigKind::Cos,
        }
    }
}

impl BasisTerm {
    /// Transformed-state coordinates this component depends on (the set Ĩ).
    pub fn sparsity(&self) -> Vec<usize> {
        match self {
            BasisTerm::LinearZ { coeffs } => {
                let mut ix: Vec<usize> = coeffs.iter().filter(|(_, c)| *c != 0.0).map(|(j, _)| *j).collect();
                ix.sort_unstable();
                ix.dedup();
                ix
            }
            BasisTerm::LinearU { .. } | BasisTerm::Constant { .. } => vec![],
            BasisTerm::Bilinear { i, j } => {
                if i == j {
                    vec![*i]
                } else {
                    let mut v = vec![*i, *j];
                    v.sort_unstable();
                    v
                }
            }
            BasisTerm::Sin { i } | BasisTerm::Cos { i } => vec![*i],
            BasisTerm::AmpTrig { amp, angle, .. } => vec![*amp, *angle],
        }
    }

    fn eval(&self, z: &DVector<f64>, u: &DVector<f64>) -> f64 {
        match self {
            BasisTerm::LinearZ { coeffs } => coeffs.iter().map(|(j, c)| c * z[*j]).sum(),
            BasisTerm::LinearU { coeffs } => coeffs.iter().map(|(j, c)| c * u[*j]).sum(),
            BasisTerm::Constant { value } => *value,
            BasisTerm::Bilinear { i, j } => z[*i] * z[*j],
            BasisTerm::Sin { i } => z[*i].sin(),
            BasisTerm::Cos { i } => z[*i].cos(),
            BasisTerm::AmpTrig { amp, angle, trig } => z[*amp] * TrigKind::from(*trig).eval(z[*angle]),
        }
    }

    /// Analytic gradient with respect to z, written into `row`.
    fn grad_z(&self, z: &DVector<f64>, row: &mut [f64]) {
        match self {
            BasisTerm::LinearZ { coeffs } => {
                for (j, c) in coeffs {
                    row[*j] += *c;
                }
            }
            BasisTerm::LinearU { .. } | BasisTerm::Constant { .. } => {}
            BasisTerm::Bilinear { i, j } => {
                if i == j {
                    row[*i] += 2.0 * z[*i];
                } else {
                    row[*i] += z[*j];
                    row[*j] += z[*i];
                }
            }
            BasisTerm::Sin { i } => row[*i] += z[*i].cos(),
            BasisTerm::Cos { i } => row[*i] += -z[*i].sin(),
            BasisTerm::AmpTrig { amp, angle, trig } => {
                let kind = TrigKind::from(*trig);
                row[*amp] += kind.eval(z[*angle]);
                row[*angle] += z[*amp] * kind.derivative(z[*angle]);
            }
        }
    }
}

/// Residual envelope for one basis component, anchored at a nominal point.
#[derive(Debug, Clone)]
pub enum ResidualEnvelope {
    /// Residual is identically zero (linear-in-z component).
    Zero,
    /// A genuine estimator pair.
    Pair(QuadraticEnvelope),
}

/// Per-component envelope scaling weights (the ρ parameters of the bilinear
/// and amplitude×trig squares).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvelopeParams {
    pub rho1: f64,
    pub rho2: f64,
    /// Overrides keyed by basis component index.
    pub per_component: BTreeMap<usize, (f64, f64)>,
}

impl Default for EnvelopeParams {
    fn default() -> Self {
        Self { rho1: 1.0, rho2: 1.0, per_component: BTreeMap::new() }
    }
}

impl EnvelopeParams {
    fn rho_for(&self, k: usize) -> (f64, f64) {
        self.per_component.get(&k).copied().unwrap_or((self.rho1, self.rho2))
    }
}

/// Vector basis ψ: a list of primitive terms over (z, u).
#[derive(Debug, Clone, PartialEq)]
pub struct TermBasis {
    q: usize,
    m: usize,
    terms: Vec<BasisTerm>,
}

impl TermBasis {
    pub fn new(q: usize, m: usize, terms: Vec<BasisTerm>) -> Self {
        Self { q, m, terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn eval(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.terms.len(), self.terms.iter().map(|t| t.eval(z, u)))
    }

    /// Analytic Jacobian ∂ψ/∂z at (z, u).
    pub fn jacobian_z(&self, z: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.terms.len(), self.q);
        let mut row = vec![0.0; self.q];
        for (k, term) in self.terms.iter().enumerate() {
            row.iter_mut().for_each(|v| *v = 0.0);
            term.grad_z(z, &mut row);
            for j in 0..self.q {
                jac[(k, j)] = row[j];
            }
        }
        jac
    }

    fn validate(&self, stage: usize) -> Result<(), ModelError> {
        for (k, term) in self.terms.iter().enumerate() {
            let check_z = |index: usize| {
                if index >= self.q {
                    Err(ModelError::TermIndexOutOfRange { stage, term: k, index, bound: self.q })
                } else {
                    Ok(())
                }
            };
            match term {
                BasisTerm::LinearZ { coeffs } => {
                    for (j, _) in coeffs {
                        check_z(*j)?;
                    }
                }
                BasisTerm::LinearU { coeffs } => {
                    for (j, _) in coeffs {
                        if *j >= self.m {
                            return Err(ModelError::TermIndexOutOfRange { stage, term: k, index: *j, bound: self.m });
                        }
                    }
                }
                BasisTerm::Constant { .. } => {}
                BasisTerm::Bilinear { i, j } => {
                    check_z(*i)?;
                    check_z(*j)?;
                }
                BasisTerm::Sin { i } | BasisTerm::Cos { i } => check_z(*i)?,
                BasisTerm::AmpTrig { amp, angle, .. } => {
                    check_z(*amp)?;
                    check_z(*angle)?;
                    if amp == angle {
                        return Err(ModelError::DegenerateAmpTrig { stage, term: k });
                    }
                }
            }
        }
        Ok(())
    }

    /// Envelope of the residual `g_k = ψ_k − (∂ψ_k/∂z at the anchor)·z`,
    /// anchored at `(z0, u0)`.
    pub fn residual_envelope(
        &self,
        k: usize,
        z0: &DVector<f64>,
        _u0: &DVector<f64>,
        params: &EnvelopeParams,
    ) -> Result<ResidualEnvelope, ModelError> {
        let (rho1, rho2) = params.rho_for(k);
        let env = match &self.terms[k] {
            BasisTerm::LinearZ { .. } => return Ok(ResidualEnvelope::Zero),
            BasisTerm::Constant { value } => QuadraticEnvelope {
                upper: QuadraticForm::constant(0, *value),
                lower: QuadraticForm::constant(0, *value),
                z_vars: vec![],
                u_vars: vec![],
                anchor: DVector::zeros(0),
            },
            BasisTerm::LinearU { coeffs } => {
                let u_vars: Vec<usize> = coeffs.iter().map(|(j, _)| *j).collect();
                let a = DVector::from_iterator(coeffs.len(), coeffs.iter().map(|(_, c)| *c));
                QuadraticEnvelope {
                    upper: QuadraticForm::linear(a.clone(), 0.0),
                    lower: QuadraticForm::linear(a, 0.0),
                    z_vars: vec![],
                    u_vars,
                    anchor: DVector::zeros(coeffs.len()),
                }
            }
            BasisTerm::Bilinear { i, j } if i == j => {
                // ψ = z²: the convex side is exact, the concave side the
                // tangent at the anchor; the residual subtracts 2z0·z.
                let z0i = z0[*i];
                QuadraticEnvelope {
                    upper: QuadraticForm { h: DMatrix::from_element(1, 1, 2.0), a: DVector::from_element(1, 0.0), c: 0.0 },
                    lower: QuadraticForm::linear(DVector::from_vec(vec![2.0 * z0i]), -z0i * z0i),
                    z_vars: vec![*i],
                    u_vars: vec![],
                    anchor: DVector::from_element(1, z0i),
                }
                .shift_affine(&DVector::from_vec(vec![2.0 * z0i]), 0.0)
            }
            BasisTerm::Bilinear { i, j } => {
                let env = bilinear_envelope(z0[*i], z0[*j], rho1, rho2)?;
                let shifted = env.shift_affine(&DVector::from_vec(vec![z0[*j], z0[*i]]), 0.0);
                QuadraticEnvelope { z_vars: vec![*i, *j], ..shifted }
            }
            BasisTerm::Sin { i } => {
                let env = sin_envelope(z0[*i]);
                let shifted = env.shift_affine(&DVector::from_vec(vec![z0[*i].cos()]), 0.0);
                QuadraticEnvelope { z_vars: vec![*i], ..shifted }
            }
            BasisTerm::Cos { i } => {
                let env = cos_envelope(z0[*i]);
                let shifted = env.shift_affine(&DVector::from_vec(vec![-z0[*i].sin()]), 0.0);
                QuadraticEnvelope { z_vars: vec![*i], ..shifted }
            }
            BasisTerm::AmpTrig { amp, angle, trig } => {
                let kind = TrigKind::from(*trig);
                let env = amplitude_trig_envelope(z0[*amp], z0[*angle], kind, rho1, rho2)?;
                let grad = DVector::from_vec(vec![kind.eval(z0[*angle]), z0[*amp] * kind.derivative(z0[*angle])]);
                let shifted = env.shift_affine(&grad, 0.0);
                QuadraticEnvelope { z_vars: vec![*amp, *angle], ..shifted }
            }
        };
        Ok(ResidualEnvelope::Pair(env))
    }
}

/// The per-stage data of the dynamics: `f(x, u) = gain · ψ(Cx, u)` plus
/// `disturbance · w`.
#[derive(Debug, Clone)]
pub struct StageDynamics {
    /// M_t, n×p.
    pub gain: DMatrix<f64>,
    /// B_t, n×r.
    pub disturbance: DMatrix<f64>,
    pub basis: Arc<TermBasis>,
}

/// Nominal trajectories around which the restriction linearizes.
#[derive(Debug, Clone)]
pub struct NominalPoint {
    /// States x_0..x_N.
    pub x: Vec<DVector<f64>>,
    /// Controls u_0..u_{N−1}.
    pub u: Vec<DVector<f64>>,
    /// Nominal initial-condition disturbance (equals x_0).
    pub w_init: DVector<f64>,
    /// Per-stage nominal disturbances w_0..w_{N−1}.
    pub w: Vec<DVector<f64>>,
    /// Transformed states z_t = C_t x_t, derived at construction.
    pub z: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
struct Linearization {
    point: NominalPoint,
    /// J_ψ at the nominal, per stage.
    jpsi: Vec<DMatrix<f64>>,
    /// J_f = M J_ψ C at the nominal, per stage.
    jf: Vec<DMatrix<f64>>,
}

/// A system over a fixed horizon in nonlinear feedback form.
#[derive(Debug, Clone)]
pub struct FeedbackModel {
    dims: Dims,
    horizon: usize,
    stages: Vec<Arc<StageDynamics>>,
    c_maps: Vec<DMatrix<f64>>,
    c_pinv: Vec<DMatrix<f64>>,
    nominal: Option<Linearization>,
}

impl FeedbackModel {
    /// Time-invariant model: one stage map and one state transform shared by
    /// every stage.
    pub fn time_invariant(stage: StageDynamics, c: DMatrix<f64>, horizon: usize) -> Result<Self, ModelError> {
        let stage = Arc::new(stage);
        let stages = vec![stage; horizon.max(1)];
        let c_maps = vec![c; horizon.max(1) + 1];
        Self::time_varying(stages, c_maps)
    }

    /// Fully stage-indexed model; `c_maps` has one entry per state x_0..x_N.
    pub fn time_varying(stages: Vec<Arc<StageDynamics>>, c_maps: Vec<DMatrix<f64>>) -> Result<Self, ModelError> {
        if stages.is_empty() {
            return Err(ModelError::HorizonTooShort);
        }
        let horizon = stages.len();
        if c_maps.len() != horizon + 1 {
            return Err(ModelError::NominalLength { expected: horizon + 1, got: c_maps.len() });
        }
        let q = c_maps[0].nrows();
        let n = c_maps[0].ncols();
        let p = stages[0].basis.len();
        let m = stages[0].basis.m;
        let r = stages[0].disturbance.ncols();
        let dims = Dims { n, m, p, q, r };

        for (t, c) in c_maps.iter().enumerate() {
            if c.nrows() != q || c.ncols() != n {
                return Err(ModelError::DimensionMismatch { stage: t, field: "state transform", expected: (q, n), got: (c.nrows(), c.ncols()) });
            }
        }
        for (t, s) in stages.iter().enumerate() {
            if s.gain.nrows() != n || s.gain.ncols() != p {
                return Err(ModelError::DimensionMismatch { stage: t, field: "basis gain", expected: (n, p), got: (s.gain.nrows(), s.gain.ncols()) });
            }
            if s.disturbance.nrows() != n || s.disturbance.ncols() != r {
                return Err(ModelError::DimensionMismatch { stage: t, field: "disturbance input", expected: (n, r), got: (s.disturbance.nrows(), s.disturbance.ncols()) });
            }
            if s.basis.q != q || s.basis.m != m || s.basis.len() != p {
                return Err(ModelError::DimensionMismatch { stage: t, field: "basis", expected: (p, q), got: (s.basis.len(), s.basis.q) });
            }
            s.basis.validate(t)?;
        }

        // Rank condition: the state transform must be one-to-one so bounded z
        // means bounded x and the pseudo-inverse exists.
        let mut c_pinv = Vec::with_capacity(c_maps.len());
        for (t, c) in c_maps.iter().enumerate() {
            let svd = c.clone().svd(true, true);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
            let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
            if c.nrows() < c.ncols() || ratio <= RANK_TOL {
                return Err(ModelError::RankDeficient { stage: t, ratio });
            }
            let pinv = svd.pseudo_inverse(RANK_TOL * smax).expect("svd computed with u/v");
            c_pinv.push(pinv);
        }

        Ok(Self { dims, horizon, stages, c_maps, c_pinv, nominal: None })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn stage(&self, t: usize) -> Result<&StageDynamics, ModelError> {
        self.stages.get(t).map(|s| s.as_ref()).ok_or(ModelError::StageOutOfRange(t, self.horizon))
    }

    /// C_t for t = 0..=N.
    pub fn c_map(&self, t: usize) -> &DMatrix<f64> {
        &self.c_maps[t]
    }

    /// Moore–Penrose pseudo-inverse of C_t.
    pub fn c_pinv(&self, t: usize) -> &DMatrix<f64> {
        &self.c_pinv[t]
    }

    /// Largest dependency-set cardinality over all stages and components
    /// (the degree of nonlinear sparsity).
    pub fn sparsity_degree(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| s.basis.terms().iter().map(|t| t.sparsity().len()))
            .max()
            .unwrap_or(0)
    }

    pub fn sparsity(&self, t: usize, k: usize) -> Result<Vec<usize>, ModelError> {
        let stage = self.stage(t)?;
        Ok(stage.basis.terms()[k].sparsity())
    }

    fn check_vec(&self, stage: usize, field: &'static str, v: &DVector<f64>, len: usize) -> Result<(), ModelError> {
        if v.len() != len {
            return Err(ModelError::DimensionMismatch { stage, field, expected: (len, 1), got: (v.len(), 1) });
        }
        Ok(())
    }

    /// One dynamics step: `f_t(x, u) + B_t w = M_t ψ_t(C_t x, u) + B_t w`.
    pub fn eval_dynamics(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let stage = self.stage(t)?;
        self.check_vec(t, "state", x, self.dims.n)?;
        self.check_vec(t, "control", u, self.dims.m)?;
        self.check_vec(t, "disturbance", w, self.dims.r)?;
        let z = self.c_map(t) * x;
        let psi = stage.basis.eval(&z, u);
        Ok(&stage.gain * psi + &stage.disturbance * w)
    }

    /// Register the linearization point; validates `z = Cx` by construction
    /// and that the states are the rollout of the controls and disturbances.
    pub fn register_nominal(&mut self, x: Vec<DVector<f64>>, u: Vec<DVector<f64>>, w_init: DVector<f64>, w: Vec<DVector<f64>>) -> Result<(), ModelError> {
        if x.len() != self.horizon + 1 {
            return Err(ModelError::NominalLength { expected: self.horizon + 1, got: x.len() });
        }
        if u.len() != self.horizon {
            return Err(ModelError::NominalLength { expected: self.horizon, got: u.len() });
        }
        if w.len() != self.horizon {
            return Err(ModelError::NominalLength { expected: self.horizon, got: w.len() });
        }
        let first_err = (&x[0] - &w_init).amax();
        if first_err > NOMINAL_TOL * (1.0 + x[0].amax()) {
            return Err(ModelError::NominalInconsistent { stage: 0, error: first_err });
        }
        for t in 0..self.horizon {
            let next = self.eval_dynamics(t, &x[t], &u[t], &w[t])?;
            let err = (&next - &x[t + 1]).amax();
            if err > NOMINAL_TOL * (1.0 + next.amax()) {
                return Err(ModelError::NominalInconsistent { stage: t, error: err });
            }
        }
        let z: Vec<DVector<f64>> = (0..=self.horizon).map(|t| self.c_map(t) * &x[t]).collect();
        let mut jpsi = Vec::with_capacity(self.horizon);
        let mut jf = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let stage = &self.stages[t];
            let jp = stage.basis.jacobian_z(&z[t], &u[t]);
            jf.push(&stage.gain * &jp * self.c_map(t));
            jpsi.push(jp);
        }
        self.nominal = Some(Linearization { point: NominalPoint { x, u, w_init, w, z }, jpsi, jf });
        Ok(())
    }

    /// Roll out controls and disturbances from `w_init` and register the
    /// result as the nominal point.
    pub fn register_nominal_rollout(&mut self, u: Vec<DVector<f64>>, w_init: DVector<f64>, w: Vec<DVector<f64>>) -> Result<(), ModelError> {
        if u.len() != self.horizon || w.len() != self.horizon {
            return Err(ModelError::NominalLength { expected: self.horizon, got: u.len().min(w.len()) });
        }
        let mut x = Vec::with_capacity(self.horizon + 1);
        x.push(w_init.clone());
        for t in 0..self.horizon {
            let next = self.eval_dynamics(t, &x[t], &u[t], &w[t])?;
            x.push(next);
        }
        self.register_nominal(x, u, w_init, w)
    }

    pub fn nominal(&self) -> Result<&NominalPoint, ModelError> {
        self.nominal.as_ref().map(|l| &l.point).ok_or(ModelError::NominalMissing)
    }

    pub fn has_nominal(&self) -> bool {
        self.nominal.is_some()
    }

    /// J_ψ at the registered nominal.
    pub fn basis_jacobian_nominal(&self, t: usize) -> Result<&DMatrix<f64>, ModelError> {
        let lin = self.nominal.as_ref().ok_or(ModelError::NominalMissing)?;
        lin.jpsi.get(t).ok_or(ModelError::StageOutOfRange(t, self.horizon))
    }

    /// J_f = M J_ψ C at the registered nominal.
    pub fn jacobian_dynamics(&self, t: usize) -> Result<&DMatrix<f64>, ModelError> {
        let lin = self.nominal.as_ref().ok_or(ModelError::NominalMissing)?;
        lin.jf.get(t).ok_or(ModelError::StageOutOfRange(t, self.horizon))
    }

    /// Nonlinear residual `g_t(z, u) = ψ_t(z, u) − J_ψ⁰ z`.
    pub fn residual(&self, t: usize, z: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let jpsi = self.basis_jacobian_nominal(t)?;
        let stage = self.stage(t)?;
        self.check_vec(t, "transformed state", z, self.dims.q)?;
        self.check_vec(t, "control", u, self.dims.m)?;
        Ok(stage.basis.eval(z, u) - jpsi * z)
    }

    /// Residual envelope catalog, anchored at the registered nominal of
    /// stage t.
    pub fn residual_envelope(&self, t: usize, k: usize, params: &EnvelopeParams) -> Result<ResidualEnvelope, ModelError> {
        let lin = self.nominal.as_ref().ok_or(ModelError::NominalMissing)?;
        let stage = self.stage(t)?;
        stage.basis.residual_envelope(k, &lin.point.z[t], &lin.point.u[t], params)
    }

    /// Central finite-difference Jacobian of the dynamics in x; validation
    /// only, never used inside the optimization loop.
    pub fn jacobian_dynamics_fd(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        let n = self.dims.n;
        let w0 = DVector::zeros(self.dims.r);
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-6 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp = self.eval_dynamics(t, &xp, u, &w0)?;
            let fm = self.eval_dynamics(t, &xm, u, &w0)?;
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Ok(jac)
    }
}

/// Continuous-time right-hand side in factored form, `ẋ = gain·ψ(x, u) + disturbance·w`.
#[derive(Debug, Clone)]
pub struct ContinuousRhs {
    pub gain: DMatrix<f64>,
    pub terms: Vec<BasisTerm>,
    pub disturbance: DMatrix<f64>,
    pub controls: usize,
}

/// Forward-Euler discretization: `f(x, u) = x + h·rhs(x, u)`, `B = h·rhs.disturbance`,
/// with the identity state transform.
pub fn discretize_euler(rhs: &ContinuousRhs, h: f64, horizon: usize) -> Result<FeedbackModel, ModelError> {
    if h <= 0.0 {
        return Err(ModelError::InvalidTimeStep(h));
    }
    let n = rhs.gain.nrows();
    let k = rhs.gain.ncols();
    let m = rhs.controls;

    let mut terms = Vec::with_capacity(n + k);
    for i in 0..n {
        terms.push(BasisTerm::LinearZ { coeffs: vec![(i, 1.0)] });
    }
    terms.extend_from_slice(&rhs.terms);

    let mut gain = DMatrix::zeros(n, n + k);
    for i in 0..n {
        gain[(i, i)] = 1.0;
        for j in 0..k {
            gain[(i, n + j)] = h * rhs.gain[(i, j)];
        }
    }
    let stage = StageDynamics {
        gain,
        disturbance: h * &rhs.disturbance,
        basis: Arc::new(TermBasis::new(n, m, terms)),
    };
    FeedbackModel::time_invariant(stage, DMatrix::identity(n, n), horizon)
}

/// The four-state ground vehicle benchmark: planar position, speed, and
/// heading with velocity disturbances on the position rates, forward-Euler
/// discretized with step `h`.
pub fn ground_vehicle_model(h: f64, horizon: usize) -> Result<FeedbackModel, ModelError> {
    let mut disturbance = DMatrix::zeros(4, 2);
    disturbance[(0, 0)] = 1.0;
    disturbance[(1, 1)] = 1.0;
    let rhs = ContinuousRhs {
        gain: DMatrix::identity(4, 4),
        terms: vec![
            BasisTerm::AmpTrig { amp: 2, angle: 3, trig: Trig::Cos },
            BasisTerm::AmpTrig { amp: 2, angle: 3, trig: Trig::Sin },
            BasisTerm::LinearU { coeffs: vec![(0, 1.0)] },
            BasisTerm::LinearU { coeffs: vec![(1, 1.0)] },
        ],
        disturbance,
        controls: 2,
    };
    discretize_euler(&rhs, h, horizon)
}

/// Linear system `x⁺ = A x + B_u u + B_w w` in feedback form (residual is
/// purely the control term).
pub fn linear_model(a: DMatrix<f64>, b_u: DMatrix<f64>, b_w: DMatrix<f64>, horizon: usize) -> Result<FeedbackModel, ModelError> {
    let n = a.nrows();
    let m = b_u.ncols();
    let mut terms = Vec::with_capacity(n + m);
    for i in 0..n {
        let coeffs: Vec<(usize, f64)> = (0..a.ncols()).filter(|j| a[(i, *j)] != 0.0).map(|j| (j, a[(i, j)])).collect();
        terms.push(BasisTerm::LinearZ { coeffs });
    }
    for j in 0..m {
        terms.push(BasisTerm::LinearU { coeffs: vec![(j, 1.0)] });
    }
    let mut gain = DMatrix::zeros(n, n + m);
    for i in 0..n {
        gain[(i, i)] = 1.0;
        for j in 0..m {
            gain[(i, n + j)] = b_u[(i, j)];
        }
    }
    let stage = StageDynamics { gain, disturbance: b_w, basis: Arc::new(TermBasis::new(n, m, terms)) };
    FeedbackModel::time_invariant(stage, DMatrix::identity(n, n), horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn scalar_linear(horizon: usize) -> FeedbackModel {
        // f = 2x + u
        linear_model(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            horizon,
        )
        .unwrap()
    }

    #[test]
    fn ground_vehicle_euler_step() {
        let model = ground_vehicle_model(0.05, 5).unwrap();
        let next = model.eval_dynamics(0, &dv(&[0.0, 0.0, 1.0, 0.0]), &dv(&[0.0, 0.0]), &dv(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(next, dv(&[0.05, 0.0, 1.0, 0.0]), epsilon = 1e-15);

        // cos(π/2) = 0: motion is purely lateral
        let th = std::f64::consts::FRAC_PI_2;
        let next = model.eval_dynamics(0, &dv(&[0.0, 0.0, 2.0, th]), &dv(&[0.0, 0.0]), &dv(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(next[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(next[1], 2.0 * 0.05, epsilon = 1e-15);
        assert_relative_eq!(next[2], 2.0, epsilon = 1e-15);
        assert_relative_eq!(next[3], th, epsilon = 1e-15);
    }

    #[test]
    fn ground_vehicle_speed_row_is_linear() {
        let h = 0.05;
        let model = ground_vehicle_model(h, 3).unwrap();
        let next = model.eval_dynamics(1, &dv(&[1.0, -2.0, 3.0, 0.7]), &dv(&[2.0, -1.0]), &dv(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(next[2], 3.0 + h * 2.0, epsilon = 1e-15);
        assert_relative_eq!(next[3], 0.7 + h * -1.0, epsilon = 1e-15);
    }

    #[test]
    fn ground_vehicle_sparsity_degree_is_two() {
        let model = ground_vehicle_model(0.05, 4).unwrap();
        assert_eq!(model.sparsity_degree(), 2);
        // the two nonlinear components depend on (speed, heading)
        assert_eq!(model.sparsity(0, 4).unwrap(), vec![2, 3]);
        assert_eq!(model.sparsity(0, 5).unwrap(), vec![2, 3]);
    }

    #[test]
    fn scalar_linear_dynamics() {
        let model = scalar_linear(3);
        let next = model.eval_dynamics(0, &dv(&[1.0]), &dv(&[0.5]), &dv(&[0.0])).unwrap();
        assert_relative_eq!(next[0], 2.5, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_names_stage_and_field() {
        let model = scalar_linear(3);
        let err = model.eval_dynamics(1, &dv(&[1.0, 2.0]), &dv(&[0.5]), &dv(&[0.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage 1") && msg.contains("state"), "{msg}");
    }

    #[test]
    fn nominal_consistency_enforced() {
        let mut model = scalar_linear(2);
        // claim x = (1, 3, 7) for u = 0, w = 0: rollout is (1, 2, 4)
        let err = model
            .register_nominal(vec![dv(&[1.0]), dv(&[3.0]), dv(&[7.0])], vec![dv(&[0.0]); 2], dv(&[1.0]), vec![dv(&[0.0]); 2])
            .unwrap_err();
        assert!(matches!(err, ModelError::NominalInconsistent { .. }));

        model
            .register_nominal_rollout(vec![dv(&[0.0]); 2], dv(&[1.0]), vec![dv(&[0.0]); 2])
            .unwrap();
        let nominal = model.nominal().unwrap();
        assert_relative_eq!(nominal.x[2][0], 4.0, epsilon = 1e-15);
        assert_eq!(nominal.z.len(), 3);
    }

    #[test]
    fn residual_requires_nominal() {
        let model = scalar_linear(2);
        assert!(matches!(model.residual(0, &dv(&[1.0]), &dv(&[0.0])), Err(ModelError::NominalMissing)));
    }

    #[test]
    fn residual_of_linear_basis_is_control_only() {
        let mut model = scalar_linear(3);
        model
            .register_nominal_rollout(vec![dv(&[0.3]); 3], dv(&[0.5]), vec![dv(&[0.0]); 3])
            .unwrap();
        // ψ = (2z, u) ⇒ g = ψ − [2; 0] z = (0, u) regardless of z
        for z in [-3.0, 0.0, 5.0] {
            let g = model.residual(0, &dv(&[z]), &dv(&[0.7])).unwrap();
            assert_relative_eq!(g[0], 0.0, epsilon = 1e-14);
            assert_relative_eq!(g[1], 0.7, epsilon = 1e-14);
        }
    }

    #[test]
    fn residual_definition_at_nominal() {
        let mut model = ground_vehicle_model(0.05, 3).unwrap();
        model
            .register_nominal_rollout(
                vec![dv(&[1.0, 0.2]); 3],
                dv(&[0.0, 0.0, 1.0, 0.0]),
                vec![dv(&[0.0, 0.0]); 3],
            )
            .unwrap();
        let nominal = model.nominal().unwrap().clone();
        let g = model.residual(1, &nominal.z[1], &nominal.u[1]).unwrap();
        let stage = model.stage(1).unwrap();
        let psi = stage.basis.eval(&nominal.z[1], &nominal.u[1]);
        let expected = &psi - model.basis_jacobian_nominal(1).unwrap() * &nominal.z[1];
        assert_relative_eq!(g, expected, epsilon = 1e-14);
    }

    /// Finite-difference oracle for the basis Jacobian, then the residual of
    /// the speed-times-cosine component away from the nominal.
    #[test]
    fn residual_against_finite_difference_jacobian() {
        let mut model = ground_vehicle_model(0.05, 2).unwrap();
        // nominal (v, θ) = (1, 0)
        model
            .register_nominal_rollout(vec![dv(&[0.0, 0.0]); 2], dv(&[0.0, 0.0, 1.0, 0.0]), vec![dv(&[0.0, 0.0]); 2])
            .unwrap();
        let z0 = model.nominal().unwrap().z[0].clone();
        let u0 = dv(&[0.0, 0.0]);
        let stage = model.stage(0).unwrap();

        // central differences of ψ in z at the nominal
        let p = stage.basis.len();
        let mut jpsi_fd = DMatrix::zeros(p, 4);
        for j in 0..4 {
            let h = 1e-6 * (1.0 + z0[j].abs());
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[j] += h;
            zm[j] -= h;
            let fp = stage.basis.eval(&zp, &u0);
            let fm = stage.basis.eval(&zm, &u0);
            for i in 0..p {
                jpsi_fd[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let jpsi = model.basis_jacobian_nominal(0).unwrap();
        assert!((jpsi - &jpsi_fd).amax() < 1e-6);

        // component 4 is v·cosθ; evaluate its residual at (v, θ) = (1, π/2)
        let z = dv(&[0.0, 0.0, 1.0, std::f64::consts::FRAC_PI_2]);
        let g = model.residual(0, &z, &u0).unwrap();
        let expected = 1.0 * z[3].cos() - (jpsi_fd.row(4) * &z)[0];
        assert_relative_eq!(g[4], expected, epsilon = 1e-6);
    }

    #[test]
    fn jacobian_identity_and_finite_difference() {
        let mut model = ground_vehicle_model(0.05, 2).unwrap();
        model
            .register_nominal_rollout(vec![dv(&[0.0, 0.0]); 2], dv(&[0.0, 0.0, 1.0, 0.0]), vec![dv(&[0.0, 0.0]); 2])
            .unwrap();
        let jf = model.jacobian_dynamics(0).unwrap().clone();
        let expected = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.0, 0.05, 0.0,
            0.0, 1.0, 0.0, 0.05,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ]);
        assert!((&jf - &expected).amax() < 1e-12);

        let nominal = model.nominal().unwrap();
        let fd = model.jacobian_dynamics_fd(0, &nominal.x[0].clone(), &nominal.u[0].clone()).unwrap();
        assert!((&jf - &fd).amax() < 1e-6);
    }

    #[test]
    fn linear_system_jacobian_is_a() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.8]);
        let mut model = linear_model(a.clone(), DMatrix::zeros(2, 1), DMatrix::identity(2, 2), 2).unwrap();
        model
            .register_nominal_rollout(vec![dv(&[0.0]); 2], dv(&[1.0, -1.0]), vec![dv(&[0.0, 0.0]); 2])
            .unwrap();
        assert!((model.jacobian_dynamics(0).unwrap() - &a).amax() < 1e-12);
    }

    #[test]
    fn identity_basis_jacobian_is_identity() {
        // ψ = z with M = C = I: J_f = I
        let stage = StageDynamics {
            gain: DMatrix::identity(2, 2),
            disturbance: DMatrix::zeros(2, 1),
            basis: Arc::new(TermBasis::new(2, 0, vec![
                BasisTerm::LinearZ { coeffs: vec![(0, 1.0)] },
                BasisTerm::LinearZ { coeffs: vec![(1, 1.0)] },
            ])),
        };
        let mut model = FeedbackModel::time_invariant(stage, DMatrix::identity(2, 2), 2).unwrap();
        model
            .register_nominal_rollout(vec![DVector::zeros(0); 2], dv(&[0.4, -0.7]), vec![dv(&[0.0]); 2])
            .unwrap();
        assert!((model.jacobian_dynamics(0).unwrap() - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn euler_edge_cases() {
        assert!(matches!(
            discretize_euler(&ContinuousRhs { gain: DMatrix::zeros(1, 0), terms: vec![], disturbance: DMatrix::zeros(1, 1), controls: 0 }, 0.0, 2),
            Err(ModelError::InvalidTimeStep(_))
        ));

        // rhs = 0 → f(x, u) = x
        let model = discretize_euler(
            &ContinuousRhs { gain: DMatrix::zeros(2, 0), terms: vec![], disturbance: DMatrix::zeros(2, 1), controls: 0 },
            0.1,
            2,
        )
        .unwrap();
        let x = dv(&[3.0, -1.0]);
        let next = model.eval_dynamics(0, &x, &DVector::zeros(0), &dv(&[0.0])).unwrap();
        assert_relative_eq!(next, x, epsilon = 1e-15);

        // rhs = u (integrator) → x + h·u, Jacobian I
        let mut model = discretize_euler(
            &ContinuousRhs {
                gain: DMatrix::identity(1, 1),
                terms: vec![BasisTerm::LinearU { coeffs: vec![(0, 1.0)] }],
                disturbance: DMatrix::zeros(1, 1),
                controls: 1,
            },
            0.1,
            2,
        )
        .unwrap();
        let next = model.eval_dynamics(0, &dv(&[1.0]), &dv(&[2.0]), &dv(&[0.0])).unwrap();
        assert_relative_eq!(next[0], 1.2, epsilon = 1e-15);
        model
            .register_nominal_rollout(vec![dv(&[0.0]); 2], dv(&[0.0]), vec![dv(&[0.0]); 2])
            .unwrap();
        assert!((model.jacobian_dynamics(0).unwrap() - DMatrix::identity(1, 1)).amax() < 1e-14);
    }

    #[test]
    fn rank_deficient_transform_rejected() {
        let stage = StageDynamics {
            gain: DMatrix::identity(2, 2),
            disturbance: DMatrix::zeros(2, 1),
            basis: Arc::new(TermBasis::new(2, 0, vec![
                BasisTerm::LinearZ { coeffs: vec![(0, 1.0)] },
                BasisTerm::LinearZ { coeffs: vec![(1, 1.0)] },
            ])),
        };
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(FeedbackModel::time_invariant(stage, c, 2), Err(ModelError::RankDeficient { .. })));
    }

    #[test]
    fn zero_horizon_rejected() {
        assert!(matches!(FeedbackModel::time_varying(vec![], vec![]), Err(ModelError::HorizonTooShort)));
    }

    /// Representation consistency: f(x, u) recomputed from the factored form
    /// matches direct Euler evaluation at random points.
    #[test]
    fn representation_consistency_random_draws() {
        let h = 0.05;
        let model = ground_vehicle_model(h, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..100 {
            let x = DVector::from_fn(4, |_, _| rng.random::<f64>() * 20.0 - 10.0);
            let u = DVector::from_fn(2, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let direct = dv(&[
                x[0] + h * x[2] * x[3].cos(),
                x[1] + h * x[2] * x[3].sin(),
                x[2] + h * u[0],
                x[3] + h * u[1],
            ]);
            let factored = model.eval_dynamics(0, &x, &u, &dv(&[0.0, 0.0])).unwrap();
            assert!((&direct - &factored).amax() <= 1e-9);
        }
    }

    /// Perturbing a coordinate outside a component's dependency set leaves it
    /// bitwise unchanged.
    #[test]
    fn sparsity_honesty_exact() {
        let model = ground_vehicle_model(0.05, 2).unwrap();
        let stage = model.stage(0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let u = dv(&[0.3, -0.2]);
        for _ in 0..20 {
            let z = DVector::from_fn(4, |_, _| rng.random::<f64>() * 10.0 - 5.0);
            let base = stage.basis.eval(&z, &u);
            for (k, term) in stage.basis.terms().iter().enumerate() {
                let deps = term.sparsity();
                for j in 0..4 {
                    if deps.contains(&j) {
                        continue;
                    }
                    let mut zp = z.clone();
                    zp[j] += 1.0 + rng.random::<f64>();
                    let perturbed = stage.basis.eval(&zp, &u);
                    assert_eq!(base[k].to_bits(), perturbed[k].to_bits(), "component {k} must ignore z[{j}]");
                }
            }
        }
    }

    #[test]
    fn envelope_catalog_covers_all_components() {
        let mut model = ground_vehicle_model(0.05, 2).unwrap();
        model
            .register_nominal_rollout(vec![dv(&[1.0, 0.5]); 2], dv(&[0.0, 0.0, 1.0, 0.3]), vec![dv(&[0.0, 0.0]); 2])
            .unwrap();
        let params = EnvelopeParams::default();
        let mut zero = 0;
        let mut pair = 0;
        for k in 0..model.dims().p {
            match model.residual_envelope(0, k, &params).unwrap() {
                ResidualEnvelope::Zero => zero += 1,
                ResidualEnvelope::Pair(env) => {
                    env.validate().unwrap();
                    pair += 1;
                }
            }
        }
        assert_eq!(zero, 4); // the four identity components
        assert_eq!(pair, 4); // two amp×trig residuals + two control terms
    }

    /// The residual envelope of the nonlinear components must bracket the
    /// true residual everywhere on a generous box.
    #[test]
    fn residual_envelopes_sound_on_box() {
        let mut model = ground_vehicle_model(0.05, 2).unwrap();
        model
            .register_nominal_rollout(vec![dv(&[2.0, 0.4]); 2], dv(&[0.0, 0.0, 3.0, -0.8]), vec![dv(&[0.0, 0.0]); 2])
            .unwrap();
        let params = EnvelopeParams::default();
        let z0 = model.nominal().unwrap().z[0].clone();
        for k in [4usize, 5] {
            let ResidualEnvelope::Pair(env) = model.residual_envelope(0, k, &params).unwrap() else {
                panic!("component {k} should have an envelope pair");
            };
            let report = crate::envelope::soundness_falsify(
                &env,
                |xi| {
                    // xi = (v, θ); the residual of an amp×trig component
                    // depends on exactly these two coordinates
                    let mut z = z0.clone();
                    z[2] = xi[0];
                    z[3] = xi[1];
                    let g = model.residual(0, &z, &dv(&[0.0, 0.0])).unwrap();
                    g[k]
                },
                &[(3.0 - 6.0, 3.0 + 6.0), (-0.8 - 3.0, -0.8 + 3.0)],
                20_000,
                3,
            );
            assert!(report.is_sound(1e-9), "component {k}: violation {}", report.worst_violation);
        }
    }
}
