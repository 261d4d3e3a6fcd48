//! Saturation-function family and seeded Monte-Carlo estimation of the
//! expectation matrices of the saturated innovation signal, with a
//! persistent on-disk cache keyed by every input that affects the result.

pub mod cache;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::estimator::{build_error_lift, gain_schedule_from, ErrorLift};
use crate::linalg::{block_diag_repeat, psd_factor, symmetrize};
use crate::sysmodel::SystemModel;

pub use cache::{lambda_cache_get_or_compute, CacheOutcome, LambdaCacheKey};

#[derive(Debug, Error)]
pub enum LambdaError {
    #[error("saturator exceeds its bound: |phi({at})| = {value} > {bound}")]
    BoundViolated { at: f64, value: f64, bound: f64 },
    #[error("invalid saturator: {0}")]
    BadSaturator(String),
    #[error("lambda cache: {0}")]
    Io(String),
    #[error("lambda cache entry corrupt: {0}")]
    CacheCorrupt(String),
}

/// Shape of the elementwise saturator.
#[derive(Debug, Clone, PartialEq)]
pub enum SatKind {
    /// Hard clamp to `[−phi_max, phi_max]`.
    Clip,
    /// Interpolation through `(x, y)` knots, constant beyond the ends.
    PiecewiseLinear { knots: Vec<(f64, f64)> },
    /// `phi_max · tanh(s / scale)`.
    Sigmoid { scale: f64 },
}

/// Bounded elementwise feedback nonlinearity. Construction certifies the
/// bound by dense grid sampling plus the analytic limit values, so a held
/// `SaturationFunction` is guaranteed to satisfy `|φ(s)| ≤ phi_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationFunction {
    kind: SatKind,
    phi_max: f64,
}

impl SaturationFunction {
    pub fn new(kind: SatKind, phi_max: f64) -> Result<Self, LambdaError> {
        if !(phi_max > 0.0) {
            return Err(LambdaError::BadSaturator("phi_max must be positive".into()));
        }
        if let SatKind::PiecewiseLinear { knots } = &kind {
            if knots.len() < 2 {
                return Err(LambdaError::BadSaturator(
                    "piecewise-linear saturator needs at least two knots".into(),
                ));
            }
            if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(LambdaError::BadSaturator(
                    "piecewise-linear knots must have strictly increasing x".into(),
                ));
            }
        }
        if let SatKind::Sigmoid { scale } = &kind {
            if !(*scale > 0.0) {
                return Err(LambdaError::BadSaturator("sigmoid scale must be positive".into()));
            }
        }
        let sat = SaturationFunction { kind, phi_max };
        sat.certify_bound()?;
        Ok(sat)
    }

    /// The standard clamp; always valid.
    pub fn clip(phi_max: f64) -> Self {
        SaturationFunction::new(SatKind::Clip, phi_max).expect("clip saturator is always bounded")
    }

    pub fn phi_max(&self) -> f64 {
        self.phi_max
    }

    pub fn kind(&self) -> &SatKind {
        &self.kind
    }

    pub fn eval(&self, s: f64) -> f64 {
        match &self.kind {
            SatKind::Clip => s.clamp(-self.phi_max, self.phi_max),
            SatKind::PiecewiseLinear { knots } => {
                let first = knots[0];
                let last = knots[knots.len() - 1];
                if s <= first.0 {
                    return first.1;
                }
                if s >= last.0 {
                    return last.1;
                }
                let idx = knots.partition_point(|k| k.0 <= s);
                let (x0, y0) = knots[idx - 1];
                let (x1, y1) = knots[idx];
                y0 + (y1 - y0) * (s - x0) / (x1 - x0)
            }
            SatKind::Sigmoid { scale } => self.phi_max * (s / scale).tanh(),
        }
    }

    /// Elementwise application.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        v.map(|s| self.eval(s))
    }

    /// Certifies `|φ| ≤ phi_max` on a dense grid over `[−1e6, 1e6]`, a finer
    /// grid near the origin, and at the analytic limits `s → ±∞`.
    pub fn certify_bound(&self) -> Result<(), LambdaError> {
        let bound = self.phi_max * (1.0 + 1e-12);
        let mut check = |s: f64| -> Result<(), LambdaError> {
            let value = self.eval(s);
            if !(value.abs() <= bound) {
                return Err(LambdaError::BoundViolated {
                    at: s,
                    value,
                    bound: self.phi_max,
                });
            }
            Ok(())
        };
        for i in 0..=2_000_000u64 {
            check(-1e6 + i as f64)?;
        }
        for i in 0..=200_000u64 {
            check(-100.0 + i as f64 * 1e-3)?;
        }
        check(f64::NEG_INFINITY)?;
        check(f64::INFINITY)?;
        Ok(())
    }

    /// Canonical text form used in cache keys.
    pub fn descriptor(&self) -> String {
        match &self.kind {
            SatKind::Clip => format!("clip[{:.17e}]", self.phi_max),
            SatKind::PiecewiseLinear { knots } => {
                let pts: Vec<String> = knots
                    .iter()
                    .map(|(x, y)| format!("({x:.17e},{y:.17e})"))
                    .collect();
                format!("pwl[{:.17e}]{{{}}}", self.phi_max, pts.join(";"))
            }
            SatKind::Sigmoid { scale } => format!("sigmoid[{:.17e},{:.17e}]", self.phi_max, scale),
        }
    }
}

/// Monte-Carlo estimates of the saturated-innovation moments at a fixed
/// error covariance: first moment, cross-moments with the estimation error
/// and the process-noise stack, and the second moment. The estimate-dependent
/// cross moment is assembled later from these pieces via
/// [`assemble_lambda_phi_x`].
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSet {
    /// `E[φ]`, length `N·p`.
    pub phi: DVector<f64>,
    /// `E[φ eᵀ]`, `N·p × n`.
    pub phi_e: DMatrix<f64>,
    /// `E[W φᵀ]`, `N·n × N·p`.
    pub w_phi: DMatrix<f64>,
    /// `E[φ φᵀ]`, `N·p × N·p`, symmetric PSD.
    pub phi_phi: DMatrix<f64>,
    /// Error covariance the table was computed at.
    pub p_used: DMatrix<f64>,
    pub sample_count: u64,
    pub seed: u64,
}

/// Per-entry Monte-Carlo standard errors for the first and second moments.
#[derive(Debug, Clone)]
pub struct LambdaStats {
    pub se_phi: DVector<f64>,
    pub se_phi_phi: DMatrix<f64>,
}

/// `Λ^{φx}(x̂) = Λ^{φe} + Λ^{φ} x̂ᵀ`: the only table entry that depends on
/// the current estimate, assembled at solve time.
pub fn assemble_lambda_phi_x(lset: &LambdaSet, xhat: &DVector<f64>) -> DMatrix<f64> {
    &lset.phi_e + &lset.phi * xhat.transpose()
}

/// Draws `(e, W, V)` with the right joint law and maps them to the stacked
/// output residual `Y − Ŷ = Ca·Fe·e + Ca·Fw·W + (I − Ca·Fv)·V`.
pub struct InnovationSampler {
    map_e: DMatrix<f64>,
    map_w: DMatrix<f64>,
    map_v: DMatrix<f64>,
    l_e: DMatrix<f64>,
    l_w: DMatrix<f64>,
    l_v: DMatrix<f64>,
    n: usize,
    p: usize,
    n_horizon: usize,
}

impl InnovationSampler {
    pub fn new(p_err: &DMatrix<f64>, model: &SystemModel, lift: &ErrorLift) -> Self {
        let (n, _m, p) = model.dims();
        let n_horizon = lift.n_horizon;
        let ca = block_diag_repeat(&model.c, n_horizon + 1);
        let map_e = &ca * &lift.fe;
        let map_w = &ca * &lift.fw;
        let map_v = DMatrix::identity((n_horizon + 1) * p, (n_horizon + 1) * p) - &ca * &lift.fv;
        InnovationSampler {
            map_e,
            map_w,
            map_v,
            l_e: psd_factor(p_err),
            l_w: psd_factor(&model.sigma_w),
            l_v: psd_factor(&model.sigma_v),
            n,
            p,
            n_horizon,
        }
    }

    /// Closed-form covariance of the stacked residual; the sample covariance
    /// converges to this.
    pub fn residual_covariance(&self, p_err: &DMatrix<f64>, model: &SystemModel) -> DMatrix<f64> {
        let w_cov = block_diag_repeat(&model.sigma_w, self.n_horizon);
        let v_cov = block_diag_repeat(&model.sigma_v, self.n_horizon + 1);
        symmetrize(
            &(&self.map_e * p_err * self.map_e.transpose()
                + &self.map_w * w_cov * self.map_w.transpose()
                + &self.map_v * v_cov * self.map_v.transpose()),
        )
    }

    /// Streams `count` draws into `visit(e, w_stack, residual)` using one
    /// deterministic generator stream per call.
    pub fn sample_visit<F>(&self, count: u64, rng: &mut ChaCha12Rng, mut visit: F)
    where
        F: FnMut(&DVector<f64>, &DVector<f64>, &DVector<f64>),
    {
        let (n, p, nh) = (self.n, self.p, self.n_horizon);
        let mut z_e = DVector::zeros(n);
        let mut z_blk = DVector::zeros(n.max(p));
        let mut e = DVector::zeros(n);
        let mut w = DVector::zeros(nh * n);
        let mut v = DVector::zeros((nh + 1) * p);
        let mut resid = DVector::zeros((nh + 1) * p);
        let normal = StandardNormal;
        for _ in 0..count {
            for zi in z_e.iter_mut() {
                *zi = normal.sample(rng);
            }
            e.gemv(1.0, &self.l_e, &z_e, 0.0);
            for k in 0..nh {
                for i in 0..n {
                    z_blk[i] = normal.sample(rng);
                }
                let mut wk = w.rows_mut(k * n, n);
                wk.gemv(1.0, &self.l_w, &z_blk.rows(0, n), 0.0);
            }
            for k in 0..=nh {
                for i in 0..p {
                    z_blk[i] = normal.sample(rng);
                }
                let mut vk = v.rows_mut(k * p, p);
                vk.gemv(1.0, &self.l_v, &z_blk.rows(0, p), 0.0);
            }
            resid.gemv(1.0, &self.map_e, &e, 0.0);
            resid.gemv(1.0, &self.map_w, &w, 1.0);
            resid.gemv(1.0, &self.map_v, &v, 1.0);
            visit(&e, &w, &resid);
        }
    }
}

/// One Monte-Carlo draw exposed by [`sample_innovation_batch`].
#[derive(Debug, Clone)]
pub struct InnovationSample {
    pub e: DVector<f64>,
    pub w: DVector<f64>,
    /// `φ` applied to the first `N·p` residual entries.
    pub phi: DVector<f64>,
}

/// Materialized batch of draws (testing and small runs; the estimator
/// streams instead of collecting).
pub fn sample_innovation_batch(
    p_err: &DMatrix<f64>,
    model: &SystemModel,
    lift: &ErrorLift,
    sat: &SaturationFunction,
    count: u64,
    seed: u64,
) -> Vec<InnovationSample> {
    let sampler = InnovationSampler::new(p_err, model, lift);
    let np = lift.n_horizon * sampler.p;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut out = Vec::with_capacity(count as usize);
    sampler.sample_visit(count, &mut rng, |e, w, resid| {
        out.push(InnovationSample {
            e: e.clone(),
            w: w.clone(),
            phi: sat.apply(&resid.rows(0, np).into_owned()),
        });
    });
    out
}

const SHARD_SIZE: u64 = 8192;

struct MomentPartial {
    s_phi: DVector<f64>,
    s_phi_sq: DVector<f64>,
    s_phi_e: DMatrix<f64>,
    s_w_phi: DMatrix<f64>,
    s_phi_phi: DMatrix<f64>,
    s_phi_phi_sq: DMatrix<f64>,
}

impl MomentPartial {
    fn zeros(np: usize, n: usize, nn: usize) -> Self {
        MomentPartial {
            s_phi: DVector::zeros(np),
            s_phi_sq: DVector::zeros(np),
            s_phi_e: DMatrix::zeros(np, n),
            s_w_phi: DMatrix::zeros(nn, np),
            s_phi_phi: DMatrix::zeros(np, np),
            s_phi_phi_sq: DMatrix::zeros(np, np),
        }
    }

    fn merge(mut self, other: MomentPartial) -> Self {
        self.s_phi += other.s_phi;
        self.s_phi_sq += other.s_phi_sq;
        self.s_phi_e += other.s_phi_e;
        self.s_w_phi += other.s_w_phi;
        self.s_phi_phi += other.s_phi_phi;
        self.s_phi_phi_sq += other.s_phi_phi_sq;
        self
    }
}

/// Sample-mean estimates of the moment tables at error covariance `p_err`.
///
/// Work is sharded across fixed-size blocks, one generator stream per shard,
/// and partial sums are reduced in shard order, so the result is bit-identical
/// for a given `(count, seed)` regardless of worker scheduling.
pub fn estimate_lambdas_with_stats(
    p_err: &DMatrix<f64>,
    model: &SystemModel,
    n_horizon: usize,
    sat: &SaturationFunction,
    count: u64,
    seed: u64,
) -> (LambdaSet, LambdaStats) {
    assert!(count >= 1, "need at least one sample");
    let (n, _m, p) = model.dims();
    let gains = gain_schedule_from(model, p_err, n_horizon);
    let lift = build_error_lift(&gains, n, p);
    let sampler = InnovationSampler::new(p_err, model, &lift);
    let np = n_horizon * p;
    let nn = n_horizon * n;

    let num_shards = count.div_ceil(SHARD_SIZE);
    let mut partials: Vec<MomentPartial> = (0..num_shards)
        .into_par_iter()
        .map(|shard| {
            let shard_count = SHARD_SIZE.min(count - shard * SHARD_SIZE);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(shard);
            let mut acc = MomentPartial::zeros(np, n, nn);
            let mut phi = DVector::zeros(np);
            sampler.sample_visit(shard_count, &mut rng, |e, w, resid| {
                for i in 0..np {
                    phi[i] = sat.eval(resid[i]);
                }
                acc.s_phi += &phi;
                for i in 0..np {
                    acc.s_phi_sq[i] += phi[i] * phi[i];
                }
                acc.s_phi_e.ger(1.0, &phi, e, 1.0);
                acc.s_w_phi.ger(1.0, w, &phi, 1.0);
                for i in 0..np {
                    let pi = phi[i];
                    for j in 0..np {
                        let v = pi * phi[j];
                        acc.s_phi_phi[(i, j)] += v;
                        acc.s_phi_phi_sq[(i, j)] += v * v;
                    }
                }
            });
            acc
        })
        .collect();

    let mut total = partials.remove(0);
    for acc in partials {
        total = total.merge(acc);
    }

    let c = count as f64;
    let phi = total.s_phi / c;
    let phi_e = total.s_phi_e / c;
    let w_phi = total.s_w_phi / c;
    let phi_phi = symmetrize(&(total.s_phi_phi / c));

    let se_phi = DVector::from_fn(np, |i, _| {
        ((total.s_phi_sq[i] / c - phi[i] * phi[i]).max(0.0) / c).sqrt()
    });
    let se_phi_phi = DMatrix::from_fn(np, np, |i, j| {
        let mean = phi_phi[(i, j)];
        ((total.s_phi_phi_sq[(i, j)] / c - mean * mean).max(0.0) / c).sqrt()
    });

    (
        LambdaSet {
            phi,
            phi_e,
            w_phi,
            phi_phi,
            p_used: p_err.clone(),
            sample_count: count,
            seed,
        },
        LambdaStats { se_phi, se_phi_phi },
    )
}

/// [`estimate_lambdas_with_stats`] without the error report.
pub fn estimate_lambdas(
    p_err: &DMatrix<f64>,
    model: &SystemModel,
    n_horizon: usize,
    sat: &SaturationFunction,
    count: u64,
    seed: u64,
) -> LambdaSet {
    estimate_lambdas_with_stats(p_err, model, n_horizon, sat, count, seed).0
}

impl LambdaSet {
    /// All-zero tables except `E[φφᵀ] = I`; handy for decoupled instances.
    pub fn decoupled_identity(n: usize, p: usize, n_horizon: usize) -> Self {
        let np = n_horizon * p;
        LambdaSet {
            phi: DVector::zeros(np),
            phi_e: DMatrix::zeros(np, n),
            w_phi: DMatrix::zeros(n_horizon * n, np),
            phi_phi: DMatrix::identity(np, np),
            p_used: DMatrix::zeros(n, n),
            sample_count: 0,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{demo_loaded, demo_system};
    use crate::estimator::riccati_limit;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    fn scalar_model(p_err: f64, sigma_v: f64) -> (SystemModel, DMatrix<f64>) {
        let model = SystemModel {
            a: DMatrix::from_element(1, 1, 0.5),
            b: DMatrix::from_element(1, 1, 1.0),
            c: DMatrix::from_element(1, 1, 1.0),
            sigma_w: DMatrix::from_element(1, 1, 1.0),
            sigma_v: DMatrix::from_element(1, 1, sigma_v),
            sigma_x0: DMatrix::identity(1, 1),
            xhat0: DVector::zeros(1),
        };
        (model, DMatrix::from_element(1, 1, p_err))
    }

    #[test]
    fn saturators_respect_bounds() {
        let clip = SaturationFunction::clip(1.5);
        assert_eq!(clip.eval(3.0), 1.5);
        assert_eq!(clip.eval(-9.0), -1.5);
        assert_eq!(clip.eval(0.2), 0.2);

        let sig = SaturationFunction::new(SatKind::Sigmoid { scale: 2.0 }, 1.0).unwrap();
        assert!(sig.eval(1e9).abs() <= 1.0);
        assert_abs_diff_eq!(sig.eval(f64::INFINITY), 1.0, epsilon = 1e-15);

        let pwl = SaturationFunction::new(
            SatKind::PiecewiseLinear {
                knots: vec![(-2.0, -1.0), (0.0, 0.0), (2.0, 1.0)],
            },
            1.0,
        )
        .unwrap();
        assert_abs_diff_eq!(pwl.eval(1.0), 0.5, epsilon = 1e-15);
        assert_eq!(pwl.eval(5.0), 1.0);
        assert_eq!(pwl.eval(f64::NEG_INFINITY), -1.0);
    }

    #[test]
    fn unbounded_knot_is_rejected() {
        let bad = SaturationFunction::new(
            SatKind::PiecewiseLinear {
                knots: vec![(-1.0, -2.0), (1.0, 2.0)],
            },
            1.0,
        );
        assert!(matches!(bad, Err(LambdaError::BoundViolated { .. })));
    }

    #[test]
    fn sampler_is_deterministic() {
        let loaded = demo_loaded();
        let model = loaded.model.inner();
        let p_circ = riccati_limit(model, 1e-12, 10_000).unwrap().p_circ;
        let sat = SaturationFunction::clip(1.0);
        let gains = gain_schedule_from(model, &p_circ, 5);
        let lift = build_error_lift(&gains, 3, 3);
        let a = sample_innovation_batch(&p_circ, model, &lift, &sat, 64, 9);
        let b = sample_innovation_batch(&p_circ, model, &lift, &sat, 64, 9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.e, y.e);
            assert_eq!(x.w, y.w);
            assert_eq!(x.phi, y.phi);
        }
    }

    #[test]
    fn degenerate_covariances_sample_point_masses() {
        let mut model = demo_system();
        model.sigma_w = DMatrix::zeros(3, 3);
        let p_zero = DMatrix::zeros(3, 3);
        let sat = SaturationFunction::clip(1.0);
        let gains = gain_schedule_from(&demo_system(), &DMatrix::identity(3, 3), 2);
        let lift = build_error_lift(&gains, 3, 3);
        let samples = sample_innovation_batch(&p_zero, &model, &lift, &sat, 32, 4);
        for s in &samples {
            assert_eq!(s.e, DVector::zeros(3));
            assert_eq!(s.w, DVector::zeros(6));
        }
        // The measurement noise still drives the residual.
        assert!(samples.iter().any(|s| s.phi.amax() > 0.0));
    }

    #[test]
    fn empirical_residual_covariance_matches_closed_form() {
        let loaded = demo_loaded();
        let model = loaded.model.inner();
        let p_circ = riccati_limit(model, 1e-12, 10_000).unwrap().p_circ;
        let n_h = 3;
        let gains = gain_schedule_from(model, &p_circ, n_h);
        let lift = build_error_lift(&gains, 3, 3);
        let sampler = InnovationSampler::new(&p_circ, model, &lift);
        let expect = sampler.residual_covariance(&p_circ, model);

        let dim = (n_h + 1) * 3;
        let count = 1_000_000u64;
        let mut acc = DMatrix::zeros(dim, dim);
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        sampler.sample_visit(count, &mut rng, |_, _, resid| {
            acc.ger(1.0, resid, resid, 1.0);
        });
        let emp = acc / count as f64;
        let rel = (&emp - &expect).norm() / expect.norm();
        assert!(rel < 0.01, "relative Frobenius error {rel}");
    }

    #[test]
    fn odd_saturator_has_vanishing_first_moment() {
        let loaded = demo_loaded();
        let model = loaded.model.inner();
        let p_circ = riccati_limit(model, 1e-12, 10_000).unwrap().p_circ;
        let sat = SaturationFunction::clip(1.0);
        let (lset, stats) = estimate_lambdas_with_stats(&p_circ, model, 5, &sat, 100_000, 21);
        for i in 0..lset.phi.len() {
            assert!(
                lset.phi[i].abs() <= 3.0 * stats.se_phi[i],
                "entry {i}: {} vs 3·SE {}",
                lset.phi[i],
                3.0 * stats.se_phi[i]
            );
        }
        // Bound invariants.
        assert!(lset.phi.amax() <= 1.0);
        assert!(lset.phi_phi.amax() <= 1.0);
        let ev = crate::linalg::sym_eigenvalues(&lset.phi_phi);
        assert!(ev[0] >= -1e-12, "second moment must be PSD");
    }

    /// Gauss–Hermite rule via the Jacobi-matrix eigendecomposition,
    /// cross-checked against the closed form for the clipped square.
    fn clip_second_moment_quadrature(c: f64, sigma: f64) -> f64 {
        let n = 200;
        let mut jac = DMatrix::zeros(n, n);
        for k in 1..n {
            let off = (k as f64 / 2.0).sqrt();
            jac[(k - 1, k)] = off;
            jac[(k, k - 1)] = off;
        }
        let eig = jac.symmetric_eigen();
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut total = 0.0;
        for i in 0..n {
            let node = eig.eigenvalues[i];
            let weight = sqrt_pi * eig.eigenvectors[(0, i)].powi(2);
            let z = std::f64::consts::SQRT_2 * sigma * node;
            total += weight * z.clamp(-c, c).powi(2);
        }
        let gh = total / sqrt_pi;

        // Closed form through the normal CDF as an oracle self-check.
        let a = c / sigma;
        let phi_cdf = 0.5 * (1.0 + statrs::function::erf::erf(a / std::f64::consts::SQRT_2));
        let phi_pdf = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let exact = sigma * sigma * ((2.0 * phi_cdf - 1.0) - 2.0 * a * phi_pdf)
            + 2.0 * c * c * (1.0 - phi_cdf);
        assert!((gh - exact).abs() < 1e-8, "quadrature self-check: {gh} vs {exact}");
        gh
    }

    #[test]
    fn scalar_second_moment_matches_quadrature() {
        // One state, one output, one-step horizon: the saturated entry is
        // C·e + v with variance c²P + Σv.
        let (model, p_err) = scalar_model(0.25, 0.5);
        let sat = SaturationFunction::clip(1.0);
        let (lset, stats) = estimate_lambdas_with_stats(&p_err, &model, 1, &sat, 100_000, 33);
        let sigma = (0.25 + 0.5_f64).sqrt();
        let expect = clip_second_moment_quadrature(1.0, sigma);
        let got = lset.phi_phi[(0, 0)];
        assert!(
            (got - expect).abs() <= 3.0 * stats.se_phi_phi[(0, 0)],
            "{got} vs {expect} ± {}",
            3.0 * stats.se_phi_phi[(0, 0)]
        );
    }

    #[test]
    fn standard_error_scales_with_sample_count() {
        let (model, p_err) = scalar_model(0.25, 0.5);
        let sat = SaturationFunction::clip(1.0);
        let spread = |count: u64| -> f64 {
            let vals: Vec<f64> = (0..24)
                .map(|s| {
                    estimate_lambdas(&p_err, &model, 1, &sat, count, 1000 + s).phi_phi[(0, 0)]
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        };
        let ratio = spread(1000) / spread(4000);
        // Quadrupling the count should halve the spread, up to noise.
        assert!(ratio > 1.4 && ratio < 2.9, "spread ratio {ratio}");
    }

    #[test]
    fn lambda_phi_x_assembly() {
        let loaded = demo_loaded();
        let model = loaded.model.inner();
        let p_circ = riccati_limit(model, 1e-12, 10_000).unwrap().p_circ;
        let sat = SaturationFunction::clip(1.0);
        let lset = estimate_lambdas(&p_circ, model, 2, &sat, 20_000, 5);

        let zero = DVector::zeros(3);
        assert_eq!(assemble_lambda_phi_x(&lset, &zero), lset.phi_e);

        let xhat = DVector::from_vec(vec![4.0, -2.0, 1.0]);
        let assembled = assemble_lambda_phi_x(&lset, &xhat);
        assert_abs_diff_eq!(
            assembled,
            &lset.phi_e + &lset.phi * xhat.transpose(),
            epsilon = 1e-15
        );

        // Joint-sampling oracle: E[φ(Y−Ŷ) x_tᵀ] with x_t = x̂ + e.
        let gains = gain_schedule_from(model, &p_circ, 2);
        let lift = build_error_lift(&gains, 3, 3);
        let count = 200_000u64;
        let samples = sample_innovation_batch(&p_circ, model, &lift, &sat, count, 5);
        let np = 2 * 3;
        let mut acc = DMatrix::zeros(np, 3);
        let mut acc_sq = DMatrix::zeros(np, 3);
        for s in &samples {
            let x = &xhat + &s.e;
            for i in 0..np {
                for j in 0..3 {
                    let v = s.phi[i] * x[j];
                    acc[(i, j)] += v;
                    acc_sq[(i, j)] += v * v;
                }
            }
        }
        let mc = &acc / count as f64;
        for i in 0..np {
            for j in 0..3 {
                let se = ((acc_sq[(i, j)] / count as f64 - mc[(i, j)].powi(2)).max(0.0)
                    / count as f64)
                    .sqrt();
                // The assembly uses its own samples; allow both errors.
                let tol = 3.0 * se + 3.0 * se;
                assert!(
                    (mc[(i, j)] - assembled[(i, j)]).abs() <= tol,
                    "entry ({i},{j}): {} vs {}",
                    mc[(i, j)],
                    assembled[(i, j)]
                );
            }
        }
    }
}
