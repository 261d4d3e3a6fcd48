//! Conditional-mean filter for the bounded-feedback loop, its Riccati limit,
//! covariance/gain bounds, and the horizon-stacked estimation-error maps.
//!
//! Even though the closed loop is nonlinear (the inputs are nonlinear
//! functions of past outputs), the conditional law of the state given the
//! outputs stays Gaussian, so the familiar gain/covariance recursion applies
//! unchanged; the input enters only through the predicted mean.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{max_abs, spd_solve_matrix, spectral_norm, sym_eigenvalues, symmetrize};
use crate::sysmodel::SystemModel;
use crate::tol::SETTLE_TOL;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("innovation covariance is singular")]
    SingularInnovationCovariance,
    #[error("Riccati iteration did not converge within {0} iterations")]
    NoConvergence(usize),
}

/// One step of the filter: predicted and filtered mean/covariance pairs plus
/// the gains of the most recent measurement update. A pure value; updates
/// return a new state.
#[derive(Debug, Clone)]
pub struct FilterState {
    /// Filtered mean `x̂_{t|t}`.
    pub xhat_filt: DVector<f64>,
    /// Filtered covariance `P_{t|t}`.
    pub p_filt: DMatrix<f64>,
    /// Predicted mean `x̂_{t|t−1}`.
    pub xhat_pred: DVector<f64>,
    /// Predicted covariance `P_{t|t−1}`.
    pub p_pred: DMatrix<f64>,
    /// Gain of the latest measurement update.
    pub gain: DMatrix<f64>,
    /// `Γ = I − KC`.
    pub gamma: DMatrix<f64>,
    /// `Φ = ΓA`.
    pub phi: DMatrix<f64>,
    /// Time index of the predicted pair.
    pub t: usize,
}

impl FilterState {
    /// Initial state before any measurement: `x̂_{0|−1}` is the prior mean
    /// and `P_{0|−1}` the initial-state covariance.
    pub fn init(model: &SystemModel) -> Self {
        let (n, _m, p) = model.dims();
        FilterState {
            xhat_filt: model.xhat0.clone(),
            p_filt: model.sigma_x0.clone(),
            xhat_pred: model.xhat0.clone(),
            p_pred: model.sigma_x0.clone(),
            gain: DMatrix::zeros(n, p),
            gamma: DMatrix::identity(n, n),
            phi: model.a.clone(),
            t: 0,
        }
    }

    /// Post-update output residual `y − C x̂_{t|t}`, the signal that is
    /// saturated and fed back by the policies.
    pub fn residual(&self, y: &DVector<f64>, model: &SystemModel) -> DVector<f64> {
        y - &model.c * &self.xhat_filt
    }

    /// Pre-update innovation `y − C x̂_{t|t−1}`.
    pub fn innovation(&self, y: &DVector<f64>, model: &SystemModel) -> DVector<f64> {
        y - &model.c * &self.xhat_pred
    }
}

/// Propagation step: `x̂_{t+1|t} = A x̂_{t|t} + B u`,
/// `P_{t+1|t} = A P_{t|t} Aᵀ + Σ_w`.
pub fn time_update(state: &FilterState, u: &DVector<f64>, model: &SystemModel) -> FilterState {
    let xhat_pred = &model.a * &state.xhat_filt + &model.b * u;
    let p_pred = symmetrize(&(&model.a * &state.p_filt * model.a.transpose() + &model.sigma_w));
    FilterState {
        xhat_pred,
        p_pred,
        t: state.t + 1,
        ..state.clone()
    }
}

/// Measurement step: gain `K = P Cᵀ (C P Cᵀ + Σ_v)^{−1}` against the
/// predicted covariance, mean correction along the innovation, covariance
/// downdate, and re-symmetrization.
pub fn measurement_update(
    state: &FilterState,
    y: &DVector<f64>,
    model: &SystemModel,
) -> Result<FilterState, EstimatorError> {
    let c = &model.c;
    let p_pred = &state.p_pred;
    let innov_cov = symmetrize(&(c * p_pred * c.transpose() + &model.sigma_v));
    let ev = sym_eigenvalues(&innov_cov);
    if ev[0] <= 0.0 {
        return Err(EstimatorError::SingularInnovationCovariance);
    }
    // K = P Cᵀ S^{-1}, computed as a solve against the factorized S.
    let gain = spd_solve_matrix(&innov_cov, &(c * p_pred)).transpose();
    let innovation = y - c * &state.xhat_pred;
    let xhat_filt = &state.xhat_pred + &gain * innovation;
    let p_filt = symmetrize(&(p_pred - &gain * c * p_pred));
    let gamma = DMatrix::identity(gain.nrows(), gain.nrows()) - &gain * c;
    let phi = &gamma * &model.a;
    Ok(FilterState {
        xhat_filt,
        p_filt,
        gain,
        gamma,
        phi,
        ..state.clone()
    })
}

/// Fixed point of the predicted-covariance recursion together with the
/// filtered limit derived from it.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// Predicted-covariance fixed point.
    pub p_star: DMatrix<f64>,
    /// Filtered limit `P° = P* − P*Cᵀ(CP*Cᵀ+Σv)^{−1}CP*`.
    pub p_circ: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// `(iteration, max-norm step)` trace for diagnostics export.
    pub history: Vec<(usize, f64)>,
}

impl RiccatiSolution {
    /// Diagnostics as CSV (`iteration,residual` per line).
    pub fn history_csv(&self) -> String {
        let mut out = String::from("iteration,residual\n");
        for (it, res) in &self.history {
            out.push_str(&format!("{it},{res:.3e}\n"));
        }
        out
    }
}

fn filtered_from_predicted(p_pred: &DMatrix<f64>, model: &SystemModel) -> DMatrix<f64> {
    let c = &model.c;
    let innov_cov = symmetrize(&(c * p_pred * c.transpose() + &model.sigma_v));
    let gain = spd_solve_matrix(&innov_cov, &(c * p_pred)).transpose();
    symmetrize(&(p_pred - gain * c * p_pred))
}

fn predicted_step(p_pred: &DMatrix<f64>, model: &SystemModel) -> DMatrix<f64> {
    let filt = filtered_from_predicted(p_pred, model);
    symmetrize(&(&model.a * filt * model.a.transpose() + &model.sigma_w))
}

/// Iterates the predicted-covariance map from `P_{0|−1} = Σ_x0` until the
/// max-norm step drops below `tol`. Requires `(A, Σ_w^{1/2})` stabilizable
/// and `(A, C)` observable for convergence; failure to converge within
/// `max_iter` signals a violated assumption.
pub fn riccati_limit(
    model: &SystemModel,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution, EstimatorError> {
    let mut p = model.sigma_x0.clone();
    let mut history = Vec::new();
    for it in 0..max_iter {
        let next = predicted_step(&p, model);
        let step = max_abs(&(&next - &p));
        history.push((it, step));
        p = next;
        if step <= tol {
            let residual = max_abs(&(predicted_step(&p, model) - &p));
            let p_circ = filtered_from_predicted(&p, model);
            return Ok(RiccatiSolution {
                p_star: p,
                p_circ,
                iterations: it + 1,
                residual,
                history,
            });
        }
    }
    Err(EstimatorError::NoConvergence(max_iter))
}

/// Uniform bounds on the filtered covariance trace and the gain norm, valid
/// from the settling index onward.
#[derive(Debug, Clone)]
pub struct CovarianceBounds {
    /// Bound on `tr(P_{t|t})` for `t ≥ t_settle`.
    pub rho: f64,
    /// Bound on `‖K_t‖` for `t ≥ t_settle`.
    pub rho_m: f64,
    /// First index at which the filtered covariance is within `SETTLE_TOL`
    /// of its limit (max norm).
    pub t_settle: usize,
}

/// Gain-norm bound `(‖Σ_w‖ + ‖A‖²‖P‖)·‖Cᵀ‖ / λ_min(Σ_v)` at a filtered
/// covariance `P` (spectral norms).
fn gain_bound_at(p_filt: &DMatrix<f64>, model: &SystemModel) -> f64 {
    let lam_min_v = sym_eigenvalues(&model.sigma_v)[0];
    let a_norm = spectral_norm(&model.a);
    let c_norm = spectral_norm(&model.c);
    (spectral_norm(&model.sigma_w) + a_norm * a_norm * spectral_norm(p_filt)) * c_norm / lam_min_v
}

/// Runs the covariance recursion, finds the settling index against the
/// asymptotic filtered covariance, and takes the suprema of `n·λ_max(P_{t|t})`
/// and of the closed-form gain bound over the settled tail.
pub fn covariance_bounds(
    model: &SystemModel,
    max_iter: usize,
) -> Result<CovarianceBounds, EstimatorError> {
    let sol = riccati_limit(model, crate::tol::RICCATI_TOL, max_iter)?;
    let n = model.a.nrows();

    let mut p_pred = model.sigma_x0.clone();
    let mut filtered = Vec::new();
    let mut t_settle = None;
    for t in 0..max_iter {
        let p_filt = filtered_from_predicted(&p_pred, model);
        let settled = max_abs(&(&p_filt - &sol.p_circ)) <= SETTLE_TOL;
        if settled && t_settle.is_none() {
            t_settle = Some(t);
        }
        filtered.push(p_filt.clone());
        p_pred = symmetrize(&(&model.a * p_filt * model.a.transpose() + &model.sigma_w));
        // Once settled and essentially stationary there is nothing left to record.
        if settled && max_abs(&(&p_pred - &sol.p_star)) <= 1e-12 {
            break;
        }
    }
    let t_settle = t_settle.ok_or(EstimatorError::NoConvergence(max_iter))?;

    let tail = filtered.iter().skip(t_settle).chain(std::iter::once(&sol.p_circ));
    let mut rho = 0.0_f64;
    let mut rho_m = 0.0_f64;
    for p in tail {
        let ev = sym_eigenvalues(p);
        rho = rho.max(n as f64 * ev[ev.len() - 1]);
        rho_m = rho_m.max(gain_bound_at(p, model));
    }
    Ok(CovarianceBounds {
        rho,
        rho_m,
        t_settle,
    })
}

/// Gains of one filter step in the error recursion
/// `e⁺ = Φ e + Γ w − K v⁺`.
#[derive(Debug, Clone)]
pub struct GainTriple {
    pub gain: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub phi: DMatrix<f64>,
}

/// Gain schedule for `steps` filter updates starting from a filtered
/// covariance `p_filt`. At the asymptotic covariance this reproduces the
/// constant steady-state gain.
pub fn gain_schedule_from(
    model: &SystemModel,
    p_filt: &DMatrix<f64>,
    steps: usize,
) -> Vec<GainTriple> {
    let n = model.a.nrows();
    let mut p = p_filt.clone();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let p_pred = symmetrize(&(&model.a * &p * model.a.transpose() + &model.sigma_w));
        let innov_cov = symmetrize(&(&model.c * &p_pred * model.c.transpose() + &model.sigma_v));
        let gain = spd_solve_matrix(&innov_cov, &(&model.c * &p_pred)).transpose();
        let gamma = DMatrix::identity(n, n) - &gain * &model.c;
        let phi = &gamma * &model.a;
        p = symmetrize(&(&p_pred - &gain * &model.c * &p_pred));
        out.push(GainTriple { gain, gamma, phi });
    }
    out
}

/// Stacked estimation-error maps over a horizon:
/// `E = Fe·e_t + Fw·W − Fv·V` for the error stack starting at `e_t`.
#[derive(Debug, Clone)]
pub struct ErrorLift {
    pub fe: DMatrix<f64>,
    pub fw: DMatrix<f64>,
    pub fv: DMatrix<f64>,
    pub n: usize,
    pub p: usize,
    pub n_horizon: usize,
}

/// Builds the strictly causal block patterns of the error lift from `N`
/// gain triples: row `i` of `Fe` is `Φ_{i−1}⋯Φ_0`; block `(i, j)` of `Fw`
/// is `Φ_{i−1}⋯Φ_{j+1}Γ_j` for `j < i`; block `(i, j)` of `Fv` is
/// `Φ_{i−1}⋯Φ_j K_{j−1}` for `1 ≤ j ≤ i`.
pub fn build_error_lift(gains: &[GainTriple], n: usize, p: usize) -> ErrorLift {
    let n_horizon = gains.len();
    let rows = (n_horizon + 1) * n;
    let mut fe = DMatrix::zeros(rows, n);
    let mut fw = DMatrix::zeros(rows, n_horizon * n);
    let mut fv = DMatrix::zeros(rows, (n_horizon + 1) * p);

    // phi_prod[i][j] = Φ_{i−1}···Φ_j (identity when j == i).
    let eye = DMatrix::identity(n, n);
    let mut phi_prod = vec![vec![eye.clone(); n_horizon + 1]; n_horizon + 1];
    for i in 0..=n_horizon {
        for j in (0..i).rev() {
            phi_prod[i][j] = &phi_prod[i][j + 1] * &gains[j].phi;
        }
    }

    for i in 0..=n_horizon {
        fe.view_mut((i * n, 0), (n, n)).copy_from(&phi_prod[i][0]);
        for j in 0..i.min(n_horizon) {
            let blk = &phi_prod[i][j + 1] * &gains[j].gamma;
            fw.view_mut((i * n, j * n), (n, n)).copy_from(&blk);
        }
        for j in 1..=i.min(n_horizon) {
            let blk = &phi_prod[i][j] * &gains[j - 1].gain;
            fv.view_mut((i * n, j * p), (n, p)).copy_from(&blk);
        }
    }
    ErrorLift {
        fe,
        fw,
        fv,
        n,
        p,
        n_horizon,
    }
}
