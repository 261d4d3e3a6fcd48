//! Drift-condition machinery: the uniform bound ζ on the estimator
//! disturbance, the minimum control authority that keeps the drift
//! constraint feasible, the always-feasible candidate controller, and the
//! constraint data handed to the program assembler.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::estimator::CovarianceBounds;
use crate::linalg::{mat_pow, min_singular_value, pinv, spectral_norm};
use crate::sysmodel::{JordanSplit, SystemModel};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("reachability matrix is degenerate (sigma_min = {0})")]
    DegenerateReachability(f64),
}

/// Constants of the drift condition for one plant/split/bounds triple.
#[derive(Debug, Clone)]
pub struct StabilityParams {
    /// Uniform bound on the conditional expected norm of the estimator
    /// disturbance over one reachability window.
    pub zeta: f64,
    /// Drift margin; the per-window expected decrease is `ε/2`.
    pub epsilon: f64,
    /// Retraction radius `r = ζ + ε/2`.
    pub r: f64,
    /// Minimum control authority for which the drift constraint is always
    /// feasible; zero when there is no orthogonal part.
    pub u_max_star: f64,
    /// `σ_min(R_κ(A2, B2))`; infinite when the orthogonal part is empty.
    pub sigma_min_r: f64,
    /// Settling time rounded up to a whole number of reachability windows.
    pub t_settle: usize,
    pub kappa: usize,
    pub bounds: CovarianceBounds,
}

/// `ζ = κ^{3/2} ρ_m (‖CA‖√ρ + ‖C‖√tr Σ_w + √tr Σ_v)`, with `ρ` the trace
/// bound and `ρ_m` the gain bound of the settled filter.
pub fn compute_zeta(model: &SystemModel, split: &JordanSplit, bounds: &CovarianceBounds) -> f64 {
    if split.kappa == 0 {
        return 0.0;
    }
    let kappa = split.kappa as f64;
    let ca = &model.c * &model.a;
    kappa.powf(1.5)
        * bounds.rho_m
        * (spectral_norm(&ca) * bounds.rho.sqrt()
            + spectral_norm(&model.c) * model.sigma_w.trace().sqrt()
            + model.sigma_v.trace().sqrt())
}

/// `U*max = σ_min(R_κ)^{−1} (ζ + ε/2)`.
pub fn compute_umax_star(zeta: f64, epsilon: f64, sigma_min_r: f64) -> Result<f64, StabilityError> {
    if sigma_min_r.is_infinite() {
        return Ok(0.0);
    }
    if !(sigma_min_r > 0.0) {
        return Err(StabilityError::DegenerateReachability(sigma_min_r));
    }
    Ok((zeta + epsilon / 2.0) / sigma_min_r)
}

impl StabilityParams {
    pub fn compute(
        model: &SystemModel,
        split: &JordanSplit,
        bounds: CovarianceBounds,
        epsilon: f64,
    ) -> Result<Self, StabilityError> {
        let zeta = compute_zeta(model, split, &bounds);
        let sigma_min_r = if split.n2 == 0 {
            f64::INFINITY
        } else {
            min_singular_value(&split.reach_kappa())
        };
        let u_max_star = compute_umax_star(zeta, epsilon, sigma_min_r)?;
        let kappa = split.kappa;
        let t_settle = if kappa == 0 {
            bounds.t_settle
        } else {
            kappa * bounds.t_settle.div_ceil(kappa)
        };
        Ok(StabilityParams {
            zeta,
            epsilon,
            r: zeta + epsilon / 2.0,
            u_max_star,
            sigma_min_r,
            t_settle,
            kappa,
            bounds,
        })
    }

    /// Threshold `ζ + ε` above which the drift constraint activates.
    pub fn threshold(&self) -> f64 {
        self.zeta + self.epsilon
    }
}

/// Euclidean retraction onto the ball of radius `r`.
fn sat_ball(z: &DVector<f64>, r: f64) -> DVector<f64> {
    let norm = z.norm();
    if norm <= r || norm == 0.0 {
        z.clone()
    } else {
        z * (r / norm)
    }
}

/// The feasibility witness `ũ = −R_κ† sat_r(A2^κ x̂₂)`: a stack of `κ`
/// inputs that cancels the retracted rotation of the orthogonal estimate.
/// Whenever `‖x̂₂‖ ≥ ζ + ε` the successor norm lands exactly at `‖x̂₂‖ − r`.
pub fn candidate_policy(
    xhat2: &DVector<f64>,
    params: &StabilityParams,
    split: &JordanSplit,
) -> DVector<f64> {
    let m = split.b2.ncols();
    if split.n2 == 0 || split.kappa == 0 {
        return DVector::zeros(0 * m);
    }
    let rotated = mat_pow(&split.a2, split.kappa) * xhat2;
    -pinv(&split.reach_kappa()) * sat_ball(&rotated, params.r)
}

/// Data of the norm-decrease constraint at one solve:
/// `‖a2k_xhat2 + R (η)_{1:κm}‖ + theta_scale·‖R (Θ)_{1:κm}‖_∞ ≤ rhs`.
#[derive(Debug, Clone)]
pub struct DriftConstraintData {
    /// `A2^κ x̂₂`.
    pub a2k_xhat2: DVector<f64>,
    /// `R_κ(A2, B2)`, `n2 × κm`.
    pub reach: DMatrix<f64>,
    /// `‖x̂₂‖ − (ζ + ε/2)`.
    pub rhs: f64,
    /// `√n2 · φ_max` multiplying the induced max-row-ℓ1 norm.
    pub theta_scale: f64,
    /// Rows of the policy the constraint touches.
    pub kappa_m: usize,
}

/// Returns the constraint data when the current orthogonal estimate is at or
/// beyond the activation threshold, `None` otherwise (including the vacuous
/// case of an empty orthogonal part).
pub fn drift_constraint_data(
    xhat2: &DVector<f64>,
    params: &StabilityParams,
    split: &JordanSplit,
    phi_max: f64,
) -> Option<DriftConstraintData> {
    if split.n2 == 0 || split.kappa == 0 {
        return None;
    }
    let norm = xhat2.norm();
    if norm < params.threshold() {
        return None;
    }
    let m = split.b2.ncols();
    Some(DriftConstraintData {
        a2k_xhat2: mat_pow(&split.a2, split.kappa) * xhat2,
        reach: split.reach_kappa(),
        rhs: norm - params.r,
        theta_scale: (split.n2 as f64).sqrt() * phi_max,
        kappa_m: split.kappa * m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::demo_loaded;
    use crate::estimator::covariance_bounds;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn demo_params(epsilon: f64) -> (crate::sysmodel::LoadedModel, StabilityParams) {
        let loaded = demo_loaded();
        let bounds = covariance_bounds(loaded.model.inner(), 10_000).unwrap();
        let params =
            StabilityParams::compute(loaded.model.inner(), &loaded.split, bounds, epsilon).unwrap();
        (loaded, params)
    }

    #[test]
    fn zeta_collapses_without_output_map() {
        // With C = 0 only the measurement-noise term survives.
        let mut model = crate::demo::demo_system();
        model.c = DMatrix::zeros(3, 3);
        let loaded = demo_loaded();
        let bounds = CovarianceBounds {
            rho: 4.0,
            rho_m: 2.5,
            t_settle: 3,
        };
        let z = compute_zeta(&model, &loaded.split, &bounds);
        let expect = (2.0_f64).powf(1.5) * 2.5 * (30.0_f64).sqrt();
        assert_abs_diff_eq!(z, expect, epsilon = 1e-12);
    }

    #[test]
    fn zeta_is_monotone_in_noise_and_bounds() {
        let loaded = demo_loaded();
        let bounds = CovarianceBounds {
            rho: 4.0,
            rho_m: 2.5,
            t_settle: 3,
        };
        let base = compute_zeta(loaded.model.inner(), &loaded.split, &bounds);

        let mut noisier = crate::demo::demo_system();
        noisier.sigma_v *= 2.0;
        assert!(compute_zeta(&noisier, &loaded.split, &bounds) > base);

        let bigger_rho = CovarianceBounds {
            rho: 8.0,
            rho_m: 2.5,
            t_settle: 3,
        };
        assert!(compute_zeta(loaded.model.inner(), &loaded.split, &bigger_rho) > base);
        let bigger_gain = CovarianceBounds {
            rho: 4.0,
            rho_m: 5.0,
            t_settle: 3,
        };
        assert!(compute_zeta(loaded.model.inner(), &loaded.split, &bigger_gain) > base);
    }

    #[test]
    fn umax_star_formula() {
        assert_abs_diff_eq!(
            compute_umax_star(163.6783, 10.0, 1.0).unwrap(),
            168.6783,
            epsilon = 1e-10
        );
        assert_eq!(compute_umax_star(0.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(matches!(
            compute_umax_star(1.0, 1.0, 0.0),
            Err(StabilityError::DegenerateReachability(_))
        ));
        assert_eq!(compute_umax_star(5.0, 2.0, f64::INFINITY).unwrap(), 0.0);
    }

    #[test]
    fn demo_reachability_has_unit_sigma_min() {
        let (_, params) = demo_params(10.0);
        assert_abs_diff_eq!(params.sigma_min_r, 1.0, epsilon = 1e-12);
        assert!(params.zeta > 0.0 && params.zeta.is_finite());
        assert_abs_diff_eq!(
            params.u_max_star,
            params.zeta + 5.0,
            epsilon = 1e-9
        );
        assert_eq!(params.t_settle % params.kappa, 0);
    }

    #[test]
    fn candidate_of_zero_is_zero() {
        let (loaded, params) = demo_params(10.0);
        let u = candidate_policy(&DVector::zeros(2), &params, &loaded.split);
        assert_eq!(u, DVector::zeros(2));
    }

    #[test]
    fn candidate_cancels_inside_the_ball() {
        let (loaded, params) = demo_params(10.0);
        let xhat2 = DVector::from_vec(vec![params.r * 0.3, -params.r * 0.2]);
        let u = candidate_policy(&xhat2, &params, &loaded.split);
        let successor = mat_pow(&loaded.split.a2, 2) * &xhat2 + loaded.split.reach_kappa() * u;
        assert!(successor.norm() < 1e-10);
    }

    #[test]
    fn candidate_norm_decrease_identity() {
        let (loaded, params) = demo_params(10.0);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..200 {
            let dir = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)).normalize();
            let scale = rng.gen_range(1.0..10.0);
            let xhat2 = dir * (params.threshold() * scale);
            let u = candidate_policy(&xhat2, &params, &loaded.split);
            assert!(u.amax() <= params.u_max_star + 1e-9);
            assert!(u.norm() <= params.r / params.sigma_min_r + 1e-9);
            let successor = mat_pow(&loaded.split.a2, 2) * &xhat2 + loaded.split.reach_kappa() * u;
            assert_abs_diff_eq!(successor.norm(), xhat2.norm() - params.r, epsilon = 1e-8);
        }
    }

    #[test]
    fn drift_data_threshold_is_strict() {
        let (loaded, params) = demo_params(10.0);
        let just_below =
            DVector::from_vec(vec![params.threshold() - 1e-9, 0.0]);
        assert!(drift_constraint_data(&just_below, &params, &loaded.split, 1.0).is_none());
        let at = DVector::from_vec(vec![params.threshold(), 0.0]);
        let data = drift_constraint_data(&at, &params, &loaded.split, 1.0).unwrap();
        assert_abs_diff_eq!(data.rhs, params.epsilon / 2.0, epsilon = 1e-9);
        assert_eq!(data.kappa_m, 2);
        assert_abs_diff_eq!(data.theta_scale, (2.0_f64).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn drift_data_vacuous_without_orthogonal_part() {
        let model = crate::sysmodel::validate_model(crate::sysmodel::SystemModel {
            a: DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.3]),
            b: DMatrix::identity(2, 2),
            c: DMatrix::identity(2, 2),
            sigma_w: DMatrix::identity(2, 2),
            sigma_v: DMatrix::identity(2, 2),
            sigma_x0: DMatrix::identity(2, 2),
            xhat0: DVector::zeros(2),
        })
        .unwrap();
        let split = crate::sysmodel::JordanSplit::from_model(&model, 2, 0).unwrap();
        let bounds = covariance_bounds(model.inner(), 10_000).unwrap();
        let params = StabilityParams::compute(model.inner(), &split, bounds, 10.0).unwrap();
        assert_eq!(params.zeta, 0.0);
        assert_eq!(params.u_max_star, 0.0);
        assert!(drift_constraint_data(&DVector::zeros(0), &params, &split, 1.0).is_none());
    }

    #[test]
    fn witness_satisfies_drift_with_zero_slack() {
        let (loaded, params) = demo_params(10.0);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..100 {
            let dir = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)).normalize();
            let xhat2 = dir * params.threshold() * rng.gen_range(1.0..5.0);
            let data = drift_constraint_data(&xhat2, &params, &loaded.split, 1.0).unwrap();
            let u = candidate_policy(&xhat2, &params, &loaded.split);
            // η = witness, Θ = 0: the norm term alone must meet the bound.
            let lhs = (&data.a2k_xhat2 + &data.reach * u).norm();
            assert!(lhs <= data.rhs + 1e-8, "slack {}", data.rhs - lhs);
            assert_abs_diff_eq!(lhs, data.rhs, epsilon = 1e-8);
        }
    }
}
