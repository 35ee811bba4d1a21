//! Stacked-trajectory algebra.
//!
//! The horizon-long dynamics are one system of equations `F(x, u, w) = 0`
//! whose Jacobian in `x` is block lower bidiagonal with an explicit inverse.
//! That inverse is never materialized; everything is built from the block
//! sensitivities `J_{f(i,j)} = J_{f_{i−1}}···J_{f_j}` (state-at-i per
//! state-at-j), accumulated stage by stage.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{FeedbackModel, ModelError};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("non-finite state encountered at stage {stage}")]
    NonFiniteState { stage: usize },
    #[error("trajectory bundle has {got} {what}, expected {expected}")]
    BundleLength { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// State, control, and disturbance trajectories over the horizon, stacked in
/// the order (x_0..x_N), (u_0..u_{N−1}), (w_init, w_0..w_{N−1}).
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub w_init: DVector<f64>,
    pub w: Vec<DVector<f64>>,
}

impl TrajectoryBundle {
    pub fn check(&self, model: &FeedbackModel) -> Result<(), TrajectoryError> {
        let n = model.horizon();
        if self.x.len() != n + 1 {
            return Err(TrajectoryError::BundleLength { what: "states", expected: n + 1, got: self.x.len() });
        }
        if self.u.len() != n {
            return Err(TrajectoryError::BundleLength { what: "controls", expected: n, got: self.u.len() });
        }
        if self.w.len() != n {
            return Err(TrajectoryError::BundleLength { what: "disturbances", expected: n, got: self.w.len() });
        }
        Ok(())
    }
}

/// Deterministic forward simulation of the dynamics; bit-identical for
/// identical inputs.
pub fn rollout(
    model: &FeedbackModel,
    w_init: &DVector<f64>,
    u: &[DVector<f64>],
    w: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>, TrajectoryError> {
    let horizon = model.horizon();
    if u.len() != horizon {
        return Err(TrajectoryError::BundleLength { what: "controls", expected: horizon, got: u.len() });
    }
    if w.len() != horizon {
        return Err(TrajectoryError::BundleLength { what: "disturbances", expected: horizon, got: w.len() });
    }
    let mut x = Vec::with_capacity(horizon + 1);
    x.push(w_init.clone());
    for t in 0..horizon {
        let next = model.eval_dynamics(t, &x[t], &u[t], &w[t])?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(TrajectoryError::NonFiniteState { stage: t + 1 });
        }
        x.push(next);
    }
    Ok(x)
}

/// Stacked residual of the dynamics equations; zero exactly when `bundle.x`
/// is the rollout of `(bundle.u, bundle.w)` from `bundle.w_init`.
pub fn assemble_residual(model: &FeedbackModel, bundle: &TrajectoryBundle) -> Result<DVector<f64>, TrajectoryError> {
    bundle.check(model)?;
    let n = model.dims().n;
    let horizon = model.horizon();
    let mut out = DVector::zeros(n * (horizon + 1));
    out.rows_mut(0, n).copy_from(&(&bundle.w_init - &bundle.x[0]));
    for t in 0..horizon {
        let step = model.eval_dynamics(t, &bundle.x[t], &bundle.u[t], &bundle.w[t])?;
        out.rows_mut((t + 1) * n, n).copy_from(&(step - &bundle.x[t + 1]));
    }
    Ok(out)
}

/// Lower-triangular table of the state-to-state sensitivities at the nominal:
/// `get(i, j)` is the Jacobian of x_i with respect to x_j, identity on the
/// diagonal. The semigroup property `J(i,j) = J(i,k)·J(k,j)` holds by
/// construction.
#[derive(Debug, Clone)]
pub struct SensitivityBlocks {
    n: usize,
    rows: Vec<Vec<DMatrix<f64>>>,
}

impl SensitivityBlocks {
    /// Build the full table by left-multiplying stage Jacobians in increasing
    /// time; O(N²) blocks, no factorization of the stacked Jacobian.
    pub fn new(model: &FeedbackModel) -> Result<Self, TrajectoryError> {
        let n = model.dims().n;
        let horizon = model.horizon();
        let mut rows: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(horizon + 1);
        rows.push(vec![DMatrix::identity(n, n)]);
        for i in 1..=horizon {
            let jf = model.jacobian_dynamics(i - 1)?.clone();
            let mut row = Vec::with_capacity(i + 1);
            for j in 0..i {
                row.push(&jf * &rows[i - 1][j]);
            }
            row.push(DMatrix::identity(n, n));
            rows.push(row);
        }
        Ok(Self { n, rows })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.rows.len() - 1
    }

    /// J_{f(i,j)} for 0 ≤ j ≤ i ≤ N.
    pub fn get(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.rows[i][j]
    }
}

/// The fixed-point operator over trajectories: `T[x]` re-propagates the
/// nonlinear residuals and disturbances through the nominal linearization.
/// A fixed point of `T` is exactly a zero of the stacked dynamics residual.
pub fn apply_fixed_point_map(
    model: &FeedbackModel,
    blocks: &SensitivityBlocks,
    x: &[DVector<f64>],
    u: &[DVector<f64>],
    w_init: &DVector<f64>,
    w: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>, TrajectoryError> {
    let horizon = model.horizon();
    // per-stage forcing: M_τ g_τ(C_τ x_τ, u_τ) + B_τ w_τ
    let mut forcing = Vec::with_capacity(horizon);
    for tau in 0..horizon {
        let stage = model.stage(tau)?;
        let z = model.c_map(tau) * &x[tau];
        let g = model.residual(tau, &z, &u[tau])?;
        forcing.push(&stage.gain * g + &stage.disturbance * &w[tau]);
    }
    let mut out = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let mut acc = blocks.get(t, 0) * w_init;
        for tau in 0..t {
            acc += blocks.get(t, tau + 1) * &forcing[tau];
        }
        out.push(acc);
    }
    Ok(out)
}

/// Linear maps from stacked residual bounds and stacked disturbances onto the
/// 2|z| tube faces (upper faces first, then lower). Rows `0..|z|` bound
/// `+C x ≤ z^u`; rows `|z|..2|z|` bound `−C x ≤ −z^ℓ`.
#[derive(Debug, Clone)]
pub struct TubeFaceMaps {
    /// K: 2|z| × (n + pN).
    pub residual_gain: DMatrix<f64>,
    /// Elementwise positive part of K.
    pub residual_gain_pos: DMatrix<f64>,
    /// Elementwise negative part of K.
    pub residual_gain_neg: DMatrix<f64>,
    /// R: 2|z| × (n + rN).
    pub disturbance_gain: DMatrix<f64>,
}

impl TubeFaceMaps {
    pub fn faces(&self) -> usize {
        self.residual_gain.nrows()
    }
}

/// Assemble the tube face maps from the sensitivity blocks: the upper half is
/// `C·(−J_F⁻¹)·M` and `C·(−J_F⁻¹)·B` by block products, the lower half its
/// negation.
pub fn tube_face_maps(model: &FeedbackModel, blocks: &SensitivityBlocks) -> Result<TubeFaceMaps, TrajectoryError> {
    let dims = model.dims();
    let horizon = model.horizon();
    let z_len = dims.q * (horizon + 1);
    let res_cols = dims.n + dims.p * horizon;
    let dist_cols = dims.n + dims.r * horizon;

    let mut cgm = DMatrix::zeros(z_len, res_cols);
    let mut cgb = DMatrix::zeros(z_len, dist_cols);
    for t in 0..=horizon {
        let c_t = model.c_map(t);
        // first block column multiplies the identity blocks of M and B
        let lead = c_t * blocks.get(t, 0);
        cgm.view_mut((t * dims.q, 0), (dims.q, dims.n)).copy_from(&lead);
        cgb.view_mut((t * dims.q, 0), (dims.q, dims.n)).copy_from(&lead);
        for j in 1..=t {
            let stage = model.stage(j - 1)?;
            let sens = c_t * blocks.get(t, j);
            cgm.view_mut((t * dims.q, dims.n + (j - 1) * dims.p), (dims.q, dims.p)).copy_from(&(&sens * &stage.gain));
            cgb.view_mut((t * dims.q, dims.n + (j - 1) * dims.r), (dims.q, dims.r)).copy_from(&(&sens * &stage.disturbance));
        }
    }

    let mut residual_gain = DMatrix::zeros(2 * z_len, res_cols);
    residual_gain.view_mut((0, 0), (z_len, res_cols)).copy_from(&cgm);
    residual_gain.view_mut((z_len, 0), (z_len, res_cols)).copy_from(&(-&cgm));
    let mut disturbance_gain = DMatrix::zeros(2 * z_len, dist_cols);
    disturbance_gain.view_mut((0, 0), (z_len, dist_cols)).copy_from(&cgb);
    disturbance_gain.view_mut((z_len, 0), (z_len, dist_cols)).copy_from(&(-&cgb));

    let residual_gain_pos = residual_gain.map(|v| v.max(0.0));
    let residual_gain_neg = residual_gain.map(|v| v.min(0.0));
    Ok(TubeFaceMaps { residual_gain, residual_gain_pos, residual_gain_neg, disturbance_gain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ground_vehicle_model, linear_model};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn scalar_doubling(horizon: usize) -> FeedbackModel {
        linear_model(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            horizon,
        )
        .unwrap()
    }

    #[test]
    fn rollout_geometric() {
        let model = scalar_doubling(3);
        let x = rollout(&model, &dv(&[1.0]), &vec![dv(&[0.0]); 3], &vec![dv(&[0.0]); 3]).unwrap();
        let flat: Vec<f64> = x.iter().map(|v| v[0]).collect();
        assert_eq!(flat, vec![1.0, 2.0, 4.0, 8.0]);
    }

    #[test]
    fn rollout_reproduces_nominal() {
        let mut model = ground_vehicle_model(0.05, 6).unwrap();
        let u: Vec<DVector<f64>> = (0..6).map(|t| dv(&[t as f64 * 0.5, -0.1 * t as f64])).collect();
        let w = vec![dv(&[0.0, 0.0]); 6];
        let x0 = dv(&[1.0, 2.0, 0.5, 0.1]);
        model.register_nominal_rollout(u.clone(), x0.clone(), w.clone()).unwrap();
        let x = rollout(&model, &x0, &u, &w).unwrap();
        for (a, b) in x.iter().zip(model.nominal().unwrap().x.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rollout_stationary_vehicle() {
        // zero speed keeps the benchmark start frozen in place
        let model = ground_vehicle_model(0.05, 10).unwrap();
        let x = rollout(
            &model,
            &dv(&[-25.0, -80.0, 0.0, 0.0]),
            &vec![dv(&[0.0, 0.0]); 10],
            &vec![dv(&[0.0, 0.0]); 10],
        )
        .unwrap();
        for state in &x {
            assert_eq!(state[0], -25.0);
            assert_eq!(state[1], -80.0);
        }
    }

    #[test]
    fn rollout_bit_identical() {
        let model = ground_vehicle_model(0.05, 8).unwrap();
        let u: Vec<DVector<f64>> = (0..8).map(|t| dv(&[(t as f64).sin() * 3.0, 0.3])).collect();
        let w: Vec<DVector<f64>> = (0..8).map(|t| dv(&[0.1 * t as f64, -0.05])).collect();
        let x0 = dv(&[0.3, -0.7, 1.1, 0.2]);
        let a = rollout(&model, &x0, &u, &w).unwrap();
        let b = rollout(&model, &x0, &u, &w).unwrap();
        for (va, vb) in a.iter().zip(b.iter()) {
            for i in 0..va.len() {
                assert_eq!(va[i].to_bits(), vb[i].to_bits());
            }
        }
    }

    #[test]
    fn rollout_detects_divergence() {
        // f = 2x blows past f64 range in ~2100 doublings of 1e300
        let model = scalar_doubling(40);
        let err = rollout(&model, &dv(&[1e300]), &vec![dv(&[0.0]); 40], &vec![dv(&[0.0]); 40]).unwrap_err();
        match err {
            TrajectoryError::NonFiniteState { stage } => assert!(stage > 0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn residual_zero_at_rollout() {
        let model = ground_vehicle_model(0.05, 5).unwrap();
        let u: Vec<DVector<f64>> = (0..5).map(|t| dv(&[1.0 + t as f64, 0.2])).collect();
        let w: Vec<DVector<f64>> = (0..5).map(|_| dv(&[0.05, -0.02])).collect();
        let w_init = dv(&[0.0, 1.0, 0.4, -0.3]);
        let x = rollout(&model, &w_init, &u, &w).unwrap();
        let bundle = TrajectoryBundle { x, u, w_init, w };
        let f = assemble_residual(&model, &bundle).unwrap();
        assert!(f.amax() < 1e-12);
    }

    #[test]
    fn residual_first_block_is_initial_mismatch() {
        let model = scalar_doubling(2);
        let x = vec![dv(&[1.0]), dv(&[2.0]), dv(&[4.0])];
        let bundle = TrajectoryBundle { x, u: vec![dv(&[0.0]); 2], w_init: dv(&[1.5]), w: vec![dv(&[0.0]); 2] };
        let f = assemble_residual(&model, &bundle).unwrap();
        assert_relative_eq!(f[0], 0.5, epsilon = 1e-15); // w_init − x_0
        assert_relative_eq!(f[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn residual_perturbation_structure() {
        let mut model = ground_vehicle_model(0.05, 4).unwrap();
        let u: Vec<DVector<f64>> = vec![dv(&[2.0, 0.4]); 4];
        let w = vec![dv(&[0.0, 0.0]); 4];
        let w_init = dv(&[0.0, 0.0, 1.0, 0.0]);
        let x = rollout(&model, &w_init, &u, &w).unwrap();
        model.register_nominal(x.clone(), u.clone(), w_init.clone(), w.clone()).unwrap();

        let delta = 1e-5;
        let mut x_pert = x.clone();
        x_pert[1][2] += delta;
        let bundle = TrajectoryBundle { x: x_pert, u, w_init, w };
        let f = assemble_residual(&model, &bundle).unwrap();
        // block 1 picks up −δ, block 2 picks up J_f·δ + O(δ²)
        assert_relative_eq!(f[4 + 2], -delta, epsilon = 1e-12);
        let jf = model.jacobian_dynamics(1).unwrap();
        let expected = jf.column(2) * delta;
        for i in 0..4 {
            assert_relative_eq!(f[8 + i], expected[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn sensitivity_scalar_powers() {
        let mut model = scalar_doubling(3);
        model
            .register_nominal_rollout(vec![dv(&[0.0]); 3], dv(&[1.0]), vec![dv(&[0.0]); 3])
            .unwrap();
        let blocks = SensitivityBlocks::new(&model).unwrap();
        assert_relative_eq!(blocks.get(3, 1)[(0, 0)], 4.0, epsilon = 1e-15);
        assert_relative_eq!(blocks.get(2, 2)[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn sensitivity_single_factor_is_stage_jacobian() {
        let mut model = ground_vehicle_model(0.05, 3).unwrap();
        model
            .register_nominal_rollout(vec![dv(&[1.0, 0.2]); 3], dv(&[0.0, 0.0, 2.0, 0.5]), vec![dv(&[0.0, 0.0]); 3])
            .unwrap();
        let blocks = SensitivityBlocks::new(&model).unwrap();
        for i in 1..=3usize {
            assert!((blocks.get(i, i - 1) - model.jacobian_dynamics(i - 1).unwrap()).amax() < 1e-14);
        }
    }

    #[test]
    fn sensitivity_semigroup_property() {
        let mut model = ground_vehicle_model(0.05, 6).unwrap();
        model
            .register_nominal_rollout(
                (0..6).map(|t| dv(&[0.5 * t as f64, 0.1])).collect(),
                dv(&[0.0, 0.0, 1.5, -0.4]),
                vec![dv(&[0.0, 0.0]); 6],
            )
            .unwrap();
        let blocks = SensitivityBlocks::new(&model).unwrap();
        for i in 0..=6usize {
            for k in 0..=i {
                for j in 0..=k {
                    let composed = blocks.get(i, k) * blocks.get(k, j);
                    assert!((blocks.get(i, j) - composed).amax() <= 1e-12 * (1.0 + blocks.get(i, j).amax()));
                }
            }
        }
    }

    /// Dense-inverse oracle at tiny N: the block table must equal the inverse
    /// of the explicitly assembled stacked Jacobian.
    #[test]
    fn sensitivity_matches_dense_inverse() {
        let mut model = ground_vehicle_model(0.05, 2).unwrap();
        model
            .register_nominal_rollout(vec![dv(&[3.0, 0.7]); 2], dv(&[1.0, -2.0, 2.0, 0.8]), vec![dv(&[0.0, 0.0]); 2])
            .unwrap();
        let n = 4;
        let total = n * 3;
        let mut jac = DMatrix::zeros(total, total);
        for t in 0..=2 {
            jac.view_mut((t * n, t * n), (n, n)).copy_from(&(-DMatrix::<f64>::identity(n, n)));
        }
        for t in 0..2 {
            jac.view_mut(((t + 1) * n, t * n), (n, n)).copy_from(model.jacobian_dynamics(t).unwrap());
        }
        let inv = jac.try_inverse().unwrap();
        let blocks = SensitivityBlocks::new(&model).unwrap();
        // inverse = −[ I; J(1,0) I; J(2,0) J(2,1) I ]
        for i in 0..=2usize {
            for j in 0..=i {
                let block = inv.view((i * n, j * n), (n, n));
                assert!((blocks.get(i, j) + block).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn fixed_point_of_rollout() {
        let mut model = ground_vehicle_model(0.05, 5).unwrap();
        // anchor the linearization somewhere else entirely: the identity holds
        // for any registered nominal
        model
            .register_nominal_rollout(vec![dv(&[0.5, -0.1]); 5], dv(&[5.0, 5.0, 1.0, 1.0]), vec![dv(&[0.0, 0.0]); 5])
            .unwrap();
        let blocks = SensitivityBlocks::new(&model).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..50 {
            let u: Vec<DVector<f64>> = (0..5).map(|_| DVector::from_fn(2, |_, _| rng.random::<f64>() * 4.0 - 2.0)).collect();
            let w: Vec<DVector<f64>> = (0..5).map(|_| DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5)).collect();
            let w_init = DVector::from_fn(4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let x = rollout(&model, &w_init, &u, &w).unwrap();
            let tx = apply_fixed_point_map(&model, &blocks, &x, &u, &w_init, &w).unwrap();
            for t in 0..=5 {
                assert!((&tx[t] - &x[t]).amax() <= 1e-8, "stage {t}");
            }
        }
    }

    #[test]
    fn fixed_point_map_constant_for_linear_systems() {
        let mut model = scalar_doubling(3);
        model
            .register_nominal_rollout(vec![dv(&[0.2]); 3], dv(&[1.0]), vec![dv(&[0.0]); 3])
            .unwrap();
        let blocks = SensitivityBlocks::new(&model).unwrap();
        let u = vec![dv(&[0.3]); 3];
        let w = vec![dv(&[0.1]); 3];
        let w_init = dv(&[0.7]);
        let expected = rollout(&model, &w_init, &u, &w).unwrap();
        // T is constant in x for linear residuals and equals the rollout
        for x_guess in [0.0, 5.0, -3.0] {
            let x = vec![dv(&[x_guess]); 4];
            let tx = apply_fixed_point_map(&model, &blocks, &x, &u, &w_init, &w).unwrap();
            for t in 0..=3 {
                assert_relative_eq!(tx[t][0], expected[t][0], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn nominal_is_fixed_point() {
        let mut model = ground_vehicle_model(0.05, 4).unwrap();
        let u = vec![dv(&[1.0, 0.1]); 4];
        let w = vec![dv(&[0.0, 0.0]); 4];
        let x0 = dv(&[0.0, 0.0, 1.0, 0.0]);
        model.register_nominal_rollout(u.clone(), x0.clone(), w.clone()).unwrap();
        let blocks = SensitivityBlocks::new(&model).unwrap();
        let x = model.nominal().unwrap().x.clone();
        let tx = apply_fixed_point_map(&model, &blocks, &x, &u, &x0, &w).unwrap();
        for t in 0..=4 {
            assert!((&tx[t] - &x[t]).amax() < 1e-10);
        }
    }

    #[test]
    fn face_maps_sign_split_and_antisymmetry() {
        let mut model = scalar_doubling(2);
        model
            .register_nominal_rollout(vec![dv(&[0.0]); 2], dv(&[1.0]), vec![dv(&[0.0]); 2])
            .unwrap();
        let blocks = SensitivityBlocks::new(&model).unwrap();
        let maps = tube_face_maps(&model, &blocks).unwrap();
        let z_len = 3;
        for i in 0..z_len {
            for c in 0..maps.residual_gain.ncols() {
                assert_eq!(maps.residual_gain[(i, c)], -maps.residual_gain[(z_len + i, c)]);
            }
        }
        for v in maps.residual_gain_pos.iter() {
            assert!(*v >= 0.0);
        }
        for v in maps.residual_gain_neg.iter() {
            assert!(*v <= 0.0);
        }
        let sum = &maps.residual_gain_pos + &maps.residual_gain_neg;
        assert!((&sum - &maps.residual_gain).amax() < 1e-15);
    }

    #[test]
    fn positive_negative_split_example() {
        let k = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
        let pos = k.map(|v: f64| v.max(0.0));
        let neg = k.map(|v: f64| v.min(0.0));
        assert_eq!(pos, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert_eq!(neg, DMatrix::from_row_slice(1, 2, &[0.0, -2.0]));
    }

    /// Cumulative-ones structure for the integrator chain: row t of the
    /// disturbance map sums the init column plus one column per elapsed stage.
    #[test]
    fn disturbance_map_reachability_weights() {
        // f = x + w, C = M = I
        let mut model = linear_model(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            2,
        )
        .unwrap();
        model
            .register_nominal_rollout(vec![dv(&[0.0]); 2], dv(&[0.0]), vec![dv(&[0.0]); 2])
            .unwrap();
        let blocks = SensitivityBlocks::new(&model).unwrap();
        let maps = tube_face_maps(&model, &blocks).unwrap();
        // upper half rows: (1), (1,1), (1,1,1)
        let expected = [
            vec![1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 1.0],
        ];
        for (t, row) in expected.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert_relative_eq!(maps.disturbance_gain[(t, c)], *v, epsilon = 1e-14);
            }
        }
    }
}
