//! Concave envelope pairs for nonlinear residual components.
//!
//! An envelope pair brackets a scalar residual `g(ξ)` between a convex
//! over-estimator and a concave under-estimator, both quadratic and both
//! tight at the anchor point. Because the estimators are convex/concave,
//! their extrema over an axis-aligned box are attained at box vertices,
//! which is what lets the restriction bound residuals over the tube with
//! finitely many convex constraints.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Curvature sign tolerance for convexity/concavity validation.
pub const CURVATURE_TOL: f64 = 1e-10;
/// Anchor coincidence tolerance (upper(anchor) == lower(anchor)).
pub const ANCHOR_TOL: f64 = 1e-9;
/// Cap on the sparsity degree of a single component; vertex enumeration is
/// 2^{|I|} so anything larger needs a coarser decomposition.
pub const SPARSITY_CAP: usize = 8;

#[derive(Debug, Error)]
pub enum EnvelopeError {
    #[error("envelope scaling parameters must be positive, got rho1={0}, rho2={1}")]
    NonPositiveRho(f64, f64),
    #[error("negative curvature bound {0}")]
    NegativeCurvature(f64),
    #[error("{side} estimator has wrong curvature sign: offending eigenvalue {eigenvalue:.3e}")]
    CurvatureSign { side: &'static str, eigenvalue: f64 },
    #[error("envelope sides disagree at the anchor by {0:.3e}")]
    AnchorMismatch(f64),
    #[error("component depends on {size} tube coordinates, above the vertex-enumeration cap {cap}; use a coarser decomposition with sparser basis terms")]
    SparsityCapExceeded { size: usize, cap: usize },
    #[error("dimension mismatch: envelope over {expected} variables, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Quadratic function `½ξᵀHξ + aᵀξ + c` in absolute coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub h: DMatrix<f64>,
    pub a: DVector<f64>,
    pub c: f64,
}

impl QuadraticForm {
    pub fn zero(dim: usize) -> Self {
        Self { h: DMatrix::zeros(dim, dim), a: DVector::zeros(dim), c: 0.0 }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self { c, ..Self::zero(dim) }
    }

    pub fn linear(a: DVector<f64>, c: f64) -> Self {
        Self { h: DMatrix::zeros(a.len(), a.len()), a, c }
    }

    /// Build from the Taylor-style anchored data: value and gradient at the
    /// anchor plus the Hessian, i.e. `c0 + gᵀΔ + ½ΔᵀHΔ` with `Δ = ξ − ξ0`.
    pub fn from_anchored(h: DMatrix<f64>, grad: DVector<f64>, value: f64, anchor: &DVector<f64>) -> Self {
        let h_anchor = &h * anchor;
        let a = &grad - &h_anchor;
        let c = value - grad.dot(anchor) + 0.5 * anchor.dot(&h_anchor);
        Self { h, a, c }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn eval(&self, xi: &DVector<f64>) -> f64 {
        0.5 * xi.dot(&(&self.h * xi)) + self.a.dot(xi) + self.c
    }

    pub fn is_purely_linear(&self) -> bool {
        self.h.iter().all(|v| *v == 0.0)
    }

    fn eigen_extremes(&self) -> (f64, f64) {
        if self.dim() == 0 {
            return (0.0, 0.0);
        }
        let sym = 0.5 * (&self.h + self.h.transpose());
        let eig = sym.symmetric_eigen();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in eig.eigenvalues.iter() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        (lo, hi)
    }
}

/// Which side of the envelope a bound constraint serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeSide {
    Upper,
    Lower,
}

/// Convex over-estimator / concave under-estimator pair for one residual
/// component, over the variable set `(z restricted to its dependency set, u)`.
///
/// `z_vars` and `u_vars` name the stage-local coordinates the estimators see,
/// in the order the quadratic forms expect them; `anchor` stacks the nominal
/// values of those coordinates in the same order.
#[derive(Debug, Clone)]
pub struct QuadraticEnvelope {
    pub upper: QuadraticForm,
    pub lower: QuadraticForm,
    pub z_vars: Vec<usize>,
    pub u_vars: Vec<usize>,
    pub anchor: DVector<f64>,
}

impl QuadraticEnvelope {
    pub fn dim(&self) -> usize {
        self.z_vars.len() + self.u_vars.len()
    }

    /// Curvature sign check plus anchor coincidence.
    pub fn validate(&self) -> Result<(), EnvelopeError> {
        let (lo_up, _) = self.upper.eigen_extremes();
        if lo_up < -CURVATURE_TOL {
            return Err(EnvelopeError::CurvatureSign { side: "upper", eigenvalue: lo_up });
        }
        let (_, hi_lo) = self.lower.eigen_extremes();
        if hi_lo > CURVATURE_TOL {
            return Err(EnvelopeError::CurvatureSign { side: "lower", eigenvalue: hi_lo });
        }
        let gap = (self.upper.eval(&self.anchor) - self.lower.eval(&self.anchor)).abs();
        let scale = 1.0 + self.upper.eval(&self.anchor).abs();
        if gap > ANCHOR_TOL * scale {
            return Err(EnvelopeError::AnchorMismatch(gap));
        }
        Ok(())
    }

    /// Subtract the affine function `lᵀξ + c` from both sides; used to turn an
    /// envelope of a basis component into an envelope of its residual.
    pub fn shift_affine(mut self, l: &DVector<f64>, c: f64) -> Self {
        self.upper.a -= l;
        self.upper.c -= c;
        self.lower.a -= l;
        self.lower.c -= c;
        self
    }

    pub fn side(&self, side: EnvelopeSide) -> &QuadraticForm {
        match side {
            EnvelopeSide::Upper => &self.upper,
            EnvelopeSide::Lower => &self.lower,
        }
    }
}

/// Appendix-style envelope of the bilinear product `x·y` anchored at
/// `(x0, y0)`, with positive scaling weights for the two squares.
pub fn bilinear_envelope(x0: f64, y0: f64, rho1: f64, rho2: f64) -> Result<QuadraticEnvelope, EnvelopeError> {
    if rho1 <= 0.0 || rho2 <= 0.0 {
        return Err(EnvelopeError::NonPositiveRho(rho1, rho2));
    }
    let anchor = DVector::from_vec(vec![x0, y0]);
    let grad = DVector::from_vec(vec![y0, x0]);
    let value = x0 * y0;
    // ¼[ρ2Δx + Δy/ρ2]² and −¼[ρ1Δx − Δy/ρ1]² as Hessians.
    let h_up = DMatrix::from_row_slice(2, 2, &[0.5 * rho2 * rho2, 0.5, 0.5, 0.5 / (rho2 * rho2)]);
    let h_lo = DMatrix::from_row_slice(2, 2, &[-0.5 * rho1 * rho1, 0.5, 0.5, -0.5 / (rho1 * rho1)]);
    Ok(QuadraticEnvelope {
        upper: QuadraticForm::from_anchored(h_up, grad.clone(), value, &anchor),
        lower: QuadraticForm::from_anchored(h_lo, grad, value, &anchor),
        z_vars: vec![0, 1],
        u_vars: vec![],
        anchor,
    })
}

/// Second-order Taylor model with a curvature bound: `g0 + ∇ᵀΔ ± ½L‖Δ‖²`.
/// Sound whenever `L` bounds the spectral norm of the Hessian on the whole
/// domain of use.
pub fn taylor_envelope(
    value: f64,
    grad: DVector<f64>,
    curvature: f64,
    anchor: DVector<f64>,
) -> Result<QuadraticEnvelope, EnvelopeError> {
    if curvature < 0.0 {
        return Err(EnvelopeError::NegativeCurvature(curvature));
    }
    let d = grad.len();
    let eye = DMatrix::identity(d, d);
    Ok(QuadraticEnvelope {
        upper: QuadraticForm::from_anchored(curvature * &eye, grad.clone(), value, &anchor),
        lower: QuadraticForm::from_anchored(-curvature * &eye, grad, value, &anchor),
        z_vars: (0..d).collect(),
        u_vars: vec![],
        anchor,
    })
}

/// Envelope of `sin θ` anchored at `θ0`; `|sin''| ≤ 1` makes it globally sound.
pub fn sin_envelope(theta0: f64) -> QuadraticEnvelope {
    taylor_envelope(theta0.sin(), DVector::from_vec(vec![theta0.cos()]), 1.0, DVector::from_vec(vec![theta0]))
        .expect("curvature is constant 1")
}

/// Envelope of `cos θ` anchored at `θ0`.
pub fn cos_envelope(theta0: f64) -> QuadraticEnvelope {
    taylor_envelope(theta0.cos(), DVector::from_vec(vec![-theta0.sin()]), 1.0, DVector::from_vec(vec![theta0]))
        .expect("curvature is constant 1")
}

/// Trigonometric factor kind for the amplitude-times-trig composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrigKind {
    Sin,
    Cos,
}

impl TrigKind {
    pub fn eval(self, theta: f64) -> f64 {
        match self {
            TrigKind::Sin => theta.sin(),
            TrigKind::Cos => theta.cos(),
        }
    }
    pub fn derivative(self, theta: f64) -> f64 {
        match self {
            TrigKind::Sin => theta.cos(),
            TrigKind::Cos => -theta.sin(),
        }
    }
}

/// Globally sound quadratic envelope for `v·trig(θ)` over `ξ = (v, θ)`,
/// anchored at `(v0, θ0)`.
///
/// Split `v·trig(θ) = v0·trig(θ) + Δv·trig(θ)`. The first term is the scaled
/// one-dimensional trig envelope (curvature `|v0|`). For the second, the
/// trig factor is 1-Lipschitz, so `|trig(θ) − trig(θ0)| ≤ |Δθ|` and the
/// weighted mean inequality gives `Δv·(trig(θ) − trig(θ0)) ≤ ½ρ²Δv² + Δθ²/(2ρ²)`.
pub fn amplitude_trig_envelope(
    v0: f64,
    theta0: f64,
    kind: TrigKind,
    rho1: f64,
    rho2: f64,
) -> Result<QuadraticEnvelope, EnvelopeError> {
    if rho1 <= 0.0 || rho2 <= 0.0 {
        return Err(EnvelopeError::NonPositiveRho(rho1, rho2));
    }
    let anchor = DVector::from_vec(vec![v0, theta0]);
    let value = v0 * kind.eval(theta0);
    let grad = DVector::from_vec(vec![kind.eval(theta0), v0 * kind.derivative(theta0)]);
    let h_curv = |rho: f64| DMatrix::from_row_slice(2, 2, &[rho * rho, 0.0, 0.0, v0.abs() + 1.0 / (rho * rho)]);
    Ok(QuadraticEnvelope {
        upper: QuadraticForm::from_anchored(h_curv(rho2), grad.clone(), value, &anchor),
        lower: QuadraticForm::from_anchored(-h_curv(rho1), grad, value, &anchor),
        z_vars: vec![0, 1],
        u_vars: vec![],
        anchor,
    })
}

/// Outcome of the randomized soundness check. Positive `worst_violation`
/// means the estimators failed to bracket the true function somewhere.
#[derive(Debug, Clone)]
pub struct FalsificationReport {
    pub worst_violation: f64,
    pub worst_point: Option<DVector<f64>>,
    pub samples: usize,
}

impl FalsificationReport {
    pub fn is_sound(&self, tol: f64) -> bool {
        self.worst_violation <= tol
    }
}

/// Randomized falsification of the estimator property over a box: samples the
/// domain and reports the worst signed violation of
/// `lower ≤ true_fn ≤ upper`. Violations are data, not errors.
pub fn soundness_falsify<F: Fn(&DVector<f64>) -> f64>(
    envelope: &QuadraticEnvelope,
    true_fn: F,
    domain: &[(f64, f64)],
    samples: usize,
    seed: u64,
) -> FalsificationReport {
    assert_eq!(domain.len(), envelope.dim(), "domain box must match envelope dimension");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_point = None;
    let mut xi = DVector::zeros(envelope.dim());
    for _ in 0..samples {
        for (j, (lo, hi)) in domain.iter().enumerate() {
            xi[j] = lo + (hi - lo) * rng.random::<f64>();
        }
        let g = true_fn(&xi);
        let violation = (g - envelope.upper.eval(&xi)).max(envelope.lower.eval(&xi) - g);
        if violation > worst {
            worst = violation;
            worst_point = Some(xi.clone());
        }
    }
    FalsificationReport { worst_violation: worst, worst_point, samples }
}

/// One emitted bound constraint, expressed over caller-supplied program
/// variable ids: `½ηᵀQη + lᵀη ≤ rhs`.
#[derive(Debug, Clone)]
pub struct BoundConstraint {
    /// Upper-triangle entries (i ≤ j by id order is not required; entries are
    /// symmetric contributions with the diagonal stated once).
    pub quad: Vec<(usize, usize, f64)>,
    pub linear: Vec<(usize, f64)>,
    pub rhs: f64,
    /// Vertex selector: bit k set means the k-th z variable picked its upper bound.
    pub vertex: usize,
}

/// Emit the vertex-enumeration constraints that make `bound_var` dominate
/// (upper side) or minorize (lower side) the estimator over the tube box.
///
/// For each of the `2^{|z_vars|}` vertex selections, the selected tube
/// variables (`z_upper_ids[k]` or `z_lower_ids[k]`) and the control variables
/// substitute into the quadratic form; the result is one convex quadratic
/// constraint per vertex:
/// upper side:  `estimator(η) − g_bound ≤ 0`,
/// lower side:  `g_bound − estimator(η) ≤ 0`.
pub fn vertex_bound_constraints(
    envelope: &QuadraticEnvelope,
    side: EnvelopeSide,
    z_upper_ids: &[usize],
    z_lower_ids: &[usize],
    u_ids: &[usize],
    bound_var: usize,
) -> Result<Vec<BoundConstraint>, EnvelopeError> {
    let nz = envelope.z_vars.len();
    if nz > SPARSITY_CAP {
        return Err(EnvelopeError::SparsityCapExceeded { size: nz, cap: SPARSITY_CAP });
    }
    if z_upper_ids.len() != nz || z_lower_ids.len() != nz {
        return Err(EnvelopeError::DimensionMismatch { expected: nz, got: z_upper_ids.len().min(z_lower_ids.len()) });
    }
    if u_ids.len() != envelope.u_vars.len() {
        return Err(EnvelopeError::DimensionMismatch { expected: envelope.u_vars.len(), got: u_ids.len() });
    }
    let form = envelope.side(side);
    // Orient so the constraint body is convex: upper side keeps the form,
    // lower side negates it.
    let sign = match side {
        EnvelopeSide::Upper => 1.0,
        EnvelopeSide::Lower => -1.0,
    };
    let dim = envelope.dim();
    let mut out = Vec::with_capacity(1 << nz);
    for vertex in 0..(1usize << nz) {
        // Program variable id for each envelope coordinate.
        let mut ids = Vec::with_capacity(dim);
        for k in 0..nz {
            ids.push(if vertex >> k & 1 == 1 { z_upper_ids[k] } else { z_lower_ids[k] });
        }
        ids.extend_from_slice(u_ids);

        // Entry convention used across the crate: (i, i, v) contributes ½vηᵢ²,
        // (i, j, v) with i ≠ j contributes vηᵢηⱼ (the symmetric pair stated once).
        let mut quad = Vec::new();
        for i in 0..dim {
            for j in i..dim {
                let hij = 0.5 * (form.h[(i, j)] + form.h[(j, i)]);
                let v = sign * hij;
                if v != 0.0 {
                    quad.push((ids[i], ids[j], v));
                }
            }
        }
        let mut linear: Vec<(usize, f64)> = Vec::new();
        for i in 0..dim {
            let v = sign * form.a[i];
            if v != 0.0 {
                merge_term(&mut linear, ids[i], v);
            }
        }
        // upper side: form(η) − g_bound ≤ 0; lower side: g_bound − form(η) ≤ 0
        merge_term(&mut linear, bound_var, -sign);
        out.push(BoundConstraint { quad: fold_quad(quad), linear, rhs: -sign * form.c, vertex });
    }
    Ok(out)
}

/// Numeric vertex evaluations of one envelope side over a concrete box;
/// the oracle counterpart of [`vertex_bound_constraints`].
pub fn vertex_evaluations(
    envelope: &QuadraticEnvelope,
    side: EnvelopeSide,
    z_lo: &DVector<f64>,
    z_hi: &DVector<f64>,
    u: &DVector<f64>,
) -> Vec<f64> {
    let nz = envelope.z_vars.len();
    let mut xi = DVector::zeros(envelope.dim());
    for (k, uv) in u.iter().enumerate() {
        xi[nz + k] = *uv;
    }
    let form = envelope.side(side);
    (0..(1usize << nz))
        .map(|vertex| {
            for k in 0..nz {
                xi[k] = if vertex >> k & 1 == 1 { z_hi[k] } else { z_lo[k] };
            }
            form.eval(&xi)
        })
        .collect()
}

fn merge_term(terms: &mut Vec<(usize, f64)>, id: usize, v: f64) {
    if let Some(t) = terms.iter_mut().find(|t| t.0 == id) {
        t.1 += v;
    } else {
        terms.push((id, v));
    }
}

/// Vertex selections can alias two envelope coordinates onto the same program
/// variable (a collapsed tube face); fold duplicates so each (i, j) appears once.
fn fold_quad(entries: Vec<(usize, usize, f64)>) -> Vec<(usize, usize, f64)> {
    let mut folded: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
    for (i, j, v) in entries {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if let Some(t) = folded.iter_mut().find(|t| t.0 == i && t.1 == j) {
            t.2 += v;
        } else {
            folded.push((i, j, v));
        }
    }
    folded
}
