//! Numeric tolerances used across the crate.
//!
//! Validation thresholds are pinned here so that every module agrees on
//! what "zero", "symmetric", and "converged" mean.

/// Relative singular-value threshold for numerical rank: singular values
/// `σ ≤ RANK_RTOL · σ_max` are treated as zero.
pub const RANK_RTOL: f64 = 1e-9;

/// Max-norm tolerance for the orthogonality check `‖A2ᵀA2 − I‖_max`.
pub const ORTHO_TOL: f64 = 1e-9;

/// Eigenvalue-modulus slack when classifying unit-circle eigenvalues.
pub const UNIT_CIRCLE_TOL: f64 = 1e-9;

/// Relative tolerance for symmetry checks on covariance inputs.
pub const SYM_RTOL: f64 = 1e-9;

/// Default max-norm tolerance for the Riccati fixed-point iteration.
pub const RICCATI_TOL: f64 = 1e-10;

/// Max-norm distance to the asymptotic filtered covariance below which the
/// recursion is considered settled (defines the settling index).
pub const SETTLE_TOL: f64 = 1e-6;

/// Default solver contract tolerance: primal constraint violations and the
/// optimality gap of a returned point must not exceed this.
pub const SOLVE_TOL: f64 = 1e-8;

/// Slack allowed when certifying the hard input bound on a returned policy.
pub const CERT_TOL: f64 = 1e-8;
