//! Plant definition, assumption checks, Jordan-split validation, and the
//! horizon-lifted block matrices.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    block_diag, block_diag_repeat, complex_rank, mat_pow, max_abs, numeric_rank, sym_eigenvalues,
    to_complex,
};
use crate::tol::{ORTHO_TOL, RANK_RTOL, SYM_RTOL, UNIT_CIRCLE_TOL};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("A is not Lyapunov stable: {0}")]
    NotLyapunovStable(String),
    #[error("(A, B) fails the PBH stabilizability test at eigenvalue {0}")]
    NotStabilizable(String),
    #[error("A1 has spectral radius {0:.6}, not Schur stable")]
    NotSchur(f64),
    #[error("A2 is not orthogonal: max |A2ᵀA2 − I| = {0:.3e}")]
    NotOrthogonal(f64),
    #[error("A is not block diagonal at the split: max off-block entry {0:.3e}")]
    NotBlockDiagonal(f64),
    #[error("declared kappa {declared} does not match recomputed value {computed}")]
    KappaMismatch { declared: usize, computed: usize },
    #[error("(A2, B2) is not reachable within n2 = {0} steps")]
    NotReachable(usize),
    #[error("invalid horizon: {0}")]
    InvalidHorizon(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("model file: {0}")]
    File(String),
}

/// Raw plant data: dynamics, output map, and noise statistics.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub sigma_x0: DMatrix<f64>,
    /// Prior mean of the initial state estimate (zero in the usual setup).
    pub xhat0: DVector<f64>,
}

impl SystemModel {
    /// `(n, m, p)`: state, input, and output dimensions.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.nrows(), self.b.ncols(), self.c.nrows())
    }

    fn check_dims(&self) -> Result<(), ModelError> {
        let (n, _m, p) = self.dims();
        let mismatch = |what: &str| Err(ModelError::DimensionMismatch(what.to_string()));
        if self.a.ncols() != n {
            return mismatch("A must be square");
        }
        if self.b.nrows() != n {
            return mismatch("B must have n rows");
        }
        if self.c.ncols() != n {
            return mismatch("C must have n columns");
        }
        if self.sigma_w.shape() != (n, n) {
            return mismatch("sigma_w must be n×n");
        }
        if self.sigma_v.shape() != (p, p) {
            return mismatch("sigma_v must be p×p");
        }
        if self.sigma_x0.shape() != (n, n) {
            return mismatch("sigma_x0 must be n×n");
        }
        if self.xhat0.len() != n {
            return mismatch("xhat0 must have length n");
        }
        Ok(())
    }
}

/// A `SystemModel` that has passed the standing-assumption checks.
/// Immutable after construction; cheap to share across threads.
#[derive(Debug, Clone)]
pub struct ValidatedModel {
    model: SystemModel,
}

impl std::ops::Deref for ValidatedModel {
    type Target = SystemModel;
    fn deref(&self) -> &SystemModel {
        &self.model
    }
}

impl ValidatedModel {
    pub fn inner(&self) -> &SystemModel {
        &self.model
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = 1.0 + max_abs(m);
    max_abs(&(m - m.transpose())) <= SYM_RTOL * scale
}

fn check_spd(m: &DMatrix<f64>, name: &'static str) -> Result<(), ModelError> {
    if !is_symmetric(m) {
        return Err(ModelError::NotPositiveDefinite(name));
    }
    let ev = sym_eigenvalues(m);
    if ev.len() == 0 || ev[0] <= 0.0 {
        return Err(ModelError::NotPositiveDefinite(name));
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>, name: &'static str) -> Result<(), ModelError> {
    if !is_symmetric(m) {
        return Err(ModelError::NotPositiveDefinite(name));
    }
    let ev = sym_eigenvalues(m);
    let scale = ev.iter().fold(1.0_f64, |a, &x| a.max(x.abs()));
    if ev.len() > 0 && ev[0] < -SYM_RTOL * scale {
        return Err(ModelError::NotPositiveDefinite(name));
    }
    Ok(())
}

/// Geometric multiplicity of eigenvalue `lambda` equals its algebraic one
/// exactly when `rank(A − λI)` stabilizes at the first power.
fn is_semisimple(a: &DMatrix<f64>, lambda: Complex<f64>) -> bool {
    let n = a.nrows();
    let mut shifted = to_complex(a);
    for i in 0..n {
        shifted[(i, i)] -= lambda;
    }
    let sq = &shifted * &shifted;
    complex_rank(&shifted) == complex_rank(&sq)
}

/// PBH test at `lambda`: `rank([A − λI, B]) = n`.
fn pbh_controllable_at(a: &DMatrix<f64>, b: &DMatrix<f64>, lambda: Complex<f64>) -> bool {
    let n = a.nrows();
    let m = b.ncols();
    let mut pencil = DMatrix::<Complex<f64>>::zeros(n, n + m);
    pencil.view_mut((0, 0), (n, n)).copy_from(&to_complex(a));
    for i in 0..n {
        pencil[(i, i)] -= lambda;
    }
    pencil.view_mut((0, n), (n, m)).copy_from(&to_complex(b));
    complex_rank(&pencil) == n
}

/// Checks the standing assumptions on the plant: consistent dimensions,
/// positive-definite noise covariances, Lyapunov stability of `A` (unit-circle
/// eigenvalues must be semisimple), and PBH stabilizability of `(A, B)`.
pub fn validate_model(model: SystemModel) -> Result<ValidatedModel, ModelError> {
    model.check_dims()?;
    check_spd(&model.sigma_w, "sigma_w")?;
    check_spd(&model.sigma_v, "sigma_v")?;
    check_psd(&model.sigma_x0, "sigma_x0")?;

    let eigs = model.a.clone().complex_eigenvalues();
    for lam in eigs.iter() {
        let modulus = lam.norm();
        if modulus > 1.0 + UNIT_CIRCLE_TOL {
            return Err(ModelError::NotLyapunovStable(format!(
                "eigenvalue {lam} has modulus {modulus:.9} > 1"
            )));
        }
        if modulus >= 1.0 - UNIT_CIRCLE_TOL && !is_semisimple(&model.a, *lam) {
            return Err(ModelError::NotLyapunovStable(format!(
                "unit-circle eigenvalue {lam} is defective"
            )));
        }
    }
    for lam in eigs.iter() {
        if lam.norm() >= 1.0 - UNIT_CIRCLE_TOL && !pbh_controllable_at(&model.a, &model.b, *lam) {
            return Err(ModelError::NotStabilizable(format!("{lam}")));
        }
    }
    Ok(ValidatedModel { model })
}

/// The `[A^{k−1}B, …, AB, B]` reachability matrix (column blocks ordered
/// from the highest power down).
pub fn reachability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, steps: usize) -> DMatrix<f64> {
    assert!(steps >= 1, "reachability matrix needs at least one step");
    assert_eq!(a.nrows(), a.ncols(), "A must be square");
    assert_eq!(a.nrows(), b.nrows(), "A and B row counts differ");
    let (k, m) = (a.nrows(), b.ncols());
    let mut out = DMatrix::zeros(k, steps * m);
    let mut power = b.clone();
    for j in (0..steps).rev() {
        out.view_mut((0, j * m), (k, m)).copy_from(&power);
        power = a * &power;
    }
    out
}

/// Smallest `k ≤ n2` with `rank(R_k(A2, B2)) = n2`; zero for an empty pair.
pub fn compute_kappa(a2: &DMatrix<f64>, b2: &DMatrix<f64>) -> Result<usize, ModelError> {
    let n2 = a2.nrows();
    if n2 == 0 {
        return Ok(0);
    }
    for k in 1..=n2 {
        if numeric_rank(&reachability_matrix(a2, b2, k)) == n2 {
            return Ok(k);
        }
    }
    Err(ModelError::NotReachable(n2))
}

/// The Schur/orthogonal partition of the dynamics, with the reachability
/// index of the orthogonal part.
#[derive(Debug, Clone)]
pub struct JordanSplit {
    pub n1: usize,
    pub n2: usize,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub kappa: usize,
}

impl JordanSplit {
    /// Extract the `(n1, n2)` partition from a validated model and compute
    /// the reachability index. The result is itself validated.
    pub fn from_model(model: &ValidatedModel, n1: usize, n2: usize) -> Result<Self, ModelError> {
        let (n, _m, _p) = model.dims();
        if n1 + n2 != n {
            return Err(ModelError::DimensionMismatch(format!(
                "split sizes {n1}+{n2} do not partition n = {n}"
            )));
        }
        let a1 = model.a.view((0, 0), (n1, n1)).into_owned();
        let a2 = model.a.view((n1, n1), (n2, n2)).into_owned();
        let b1 = model.b.rows(0, n1).into_owned();
        let b2 = model.b.rows(n1, n2).into_owned();
        let kappa = compute_kappa(&a2, &b2)?;
        let split = JordanSplit {
            n1,
            n2,
            a1,
            a2,
            b1,
            b2,
            kappa,
        };
        validate_split(model, split)
    }

    /// Input dimension shared by both blocks.
    pub fn input_dim(&self) -> usize {
        self.b2.ncols().max(self.b1.ncols())
    }

    /// `R_κ(A2, B2)`, empty when the orthogonal part is absent.
    pub fn reach_kappa(&self) -> DMatrix<f64> {
        if self.n2 == 0 || self.kappa == 0 {
            return DMatrix::zeros(0, 0);
        }
        reachability_matrix(&self.a2, &self.b2, self.kappa)
    }
}

/// Verifies every split invariant: the declared blocks agree with `A`,
/// `A1` is Schur, `A2` is orthogonal, and the declared `kappa` is minimal.
pub fn validate_split(model: &ValidatedModel, split: JordanSplit) -> Result<JordanSplit, ModelError> {
    let (n, _m, _p) = model.dims();
    if split.n1 + split.n2 != n {
        return Err(ModelError::DimensionMismatch(format!(
            "split sizes {}+{} do not partition n = {}",
            split.n1, split.n2, n
        )));
    }
    let (n1, n2) = (split.n1, split.n2);

    // The dynamics must actually decouple at the declared partition.
    let off1 = max_abs(&model.a.view((0, n1), (n1, n2)).into_owned());
    let off2 = max_abs(&model.a.view((n1, 0), (n2, n1)).into_owned());
    let scale = 1.0 + max_abs(&model.a);
    if off1.max(off2) > SYM_RTOL * scale {
        return Err(ModelError::NotBlockDiagonal(off1.max(off2)));
    }

    if n1 > 0 {
        let rho = split
            .a1
            .clone()
            .complex_eigenvalues()
            .iter()
            .fold(0.0_f64, |acc, l| acc.max(l.norm()));
        if rho >= 1.0 - UNIT_CIRCLE_TOL {
            return Err(ModelError::NotSchur(rho));
        }
    }
    if n2 > 0 {
        let gram = split.a2.transpose() * &split.a2;
        let dev = max_abs(&(gram - DMatrix::identity(n2, n2)));
        if dev > ORTHO_TOL {
            return Err(ModelError::NotOrthogonal(dev));
        }
    }
    let computed = compute_kappa(&split.a2, &split.b2)?;
    if computed != split.kappa {
        return Err(ModelError::KappaMismatch {
            declared: split.kappa,
            computed,
        });
    }
    // Minimality: rank must be deficient one step earlier.
    if split.kappa > 1 {
        let r_prev = reachability_matrix(&split.a2, &split.b2, split.kappa - 1);
        debug_assert!(numeric_rank(&r_prev) < n2);
    }
    Ok(split)
}

/// Prediction/control horizon lengths and the input/saturation bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub n_horizon: usize,
    pub n_control: usize,
    pub u_max: f64,
    pub phi_max: f64,
}

impl HorizonConfig {
    /// Checks `N ≥ Nc ≥ max(κ, 1)` together with positivity of the bounds.
    pub fn validate(&self, kappa: usize) -> Result<(), ModelError> {
        if self.n_horizon < self.n_control {
            return Err(ModelError::InvalidHorizon(format!(
                "N = {} must be at least Nc = {}",
                self.n_horizon, self.n_control
            )));
        }
        if self.n_control < kappa.max(1) {
            return Err(ModelError::InvalidHorizon(format!(
                "Nc = {} must be at least max(kappa, 1) = {}",
                self.n_control,
                kappa.max(1)
            )));
        }
        if !(self.u_max > 0.0) {
            return Err(ModelError::InvalidHorizon("u_max must be positive".into()));
        }
        if !(self.phi_max > 0.0) {
            return Err(ModelError::InvalidHorizon("phi_max must be positive".into()));
        }
        Ok(())
    }
}

/// Per-stage quadratic weights: `Wx_0..Wx_{N−1}`, terminal `Wx_N`, and
/// `Wu_0..Wu_{N−1}`, all symmetric positive definite.
#[derive(Debug, Clone)]
pub struct CostWeights {
    pub wx: Vec<DMatrix<f64>>,
    pub wx_n: DMatrix<f64>,
    pub wu: Vec<DMatrix<f64>>,
}

impl CostWeights {
    /// Time-invariant weights repeated across the horizon.
    pub fn uniform(wx: DMatrix<f64>, wu: DMatrix<f64>, n_horizon: usize) -> Self {
        CostWeights {
            wx: vec![wx.clone(); n_horizon],
            wx_n: wx,
            wu: vec![wu; n_horizon],
        }
    }

    pub fn validate(&self, n: usize, m: usize, n_horizon: usize) -> Result<(), ModelError> {
        if self.wx.len() != n_horizon || self.wu.len() != n_horizon {
            return Err(ModelError::InvalidWeights(format!(
                "need {n_horizon} stage weights, got {} state and {} input",
                self.wx.len(),
                self.wu.len()
            )));
        }
        for (idx, w) in self.wx.iter().chain(std::iter::once(&self.wx_n)).enumerate() {
            if w.shape() != (n, n) {
                return Err(ModelError::InvalidWeights(format!("Wx[{idx}] must be {n}×{n}")));
            }
            check_spd(w, "Wx").map_err(|_| {
                ModelError::InvalidWeights(format!("Wx[{idx}] must be symmetric positive definite"))
            })?;
        }
        for (idx, w) in self.wu.iter().enumerate() {
            if w.shape() != (m, m) {
                return Err(ModelError::InvalidWeights(format!("Wu[{idx}] must be {m}×{m}")));
            }
            check_spd(w, "Wu").map_err(|_| {
                ModelError::InvalidWeights(format!("Wu[{idx}] must be symmetric positive definite"))
            })?;
        }
        Ok(())
    }
}

/// Block matrices describing the horizon-stacked dynamics and cost:
/// `X = Aa x_t + Ba U + Da W`, `Y = Ca X + V`, with lifted weights and the
/// input-side Gram matrix `M1 = Wua + Baᵀ Wxa Ba`.
#[derive(Debug, Clone)]
pub struct LiftedSystem {
    pub n_horizon: usize,
    pub aa: DMatrix<f64>,
    pub ba: DMatrix<f64>,
    pub da: DMatrix<f64>,
    pub ca: DMatrix<f64>,
    pub wxa: DMatrix<f64>,
    pub wua: DMatrix<f64>,
    pub m1: DMatrix<f64>,
}

/// Builds the stacked dynamics over `N` steps. Block `(i, j)` of `Ba` is
/// `A^{i−j−1}B` for `i > j` and zero otherwise; `Da` follows the same
/// pattern with `B` replaced by the identity.
pub fn build_lifted(model: &ValidatedModel, weights: &CostWeights, n_horizon: usize) -> LiftedSystem {
    assert!(n_horizon >= 1, "horizon must be at least one step");
    let (n, m, p) = model.dims();
    let powers: Vec<DMatrix<f64>> = (0..=n_horizon).map(|k| mat_pow(&model.a, k)).collect();

    let mut aa = DMatrix::zeros((n_horizon + 1) * n, n);
    for (i, pw) in powers.iter().enumerate() {
        aa.view_mut((i * n, 0), (n, n)).copy_from(pw);
    }

    let mut ba = DMatrix::zeros((n_horizon + 1) * n, n_horizon * m);
    let mut da = DMatrix::zeros((n_horizon + 1) * n, n_horizon * n);
    for i in 1..=n_horizon {
        for j in 0..i {
            let pw = &powers[i - j - 1];
            ba.view_mut((i * n, j * m), (n, m)).copy_from(&(pw * &model.b));
            da.view_mut((i * n, j * n), (n, n)).copy_from(pw);
        }
    }

    let ca = block_diag_repeat(&model.c, n_horizon + 1);
    let mut wx_blocks = weights.wx.clone();
    wx_blocks.push(weights.wx_n.clone());
    let wxa = block_diag(&wx_blocks);
    let wua = block_diag(&weights.wu);
    let m1 = &wua + ba.transpose() * &wxa * &ba;
    let _ = p;

    LiftedSystem {
        n_horizon,
        aa,
        ba,
        da,
        ca,
        wxa,
        wua,
        m1,
    }
}

/// On-disk model description: row-major nested arrays plus the split,
/// horizon, and weight sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    pub sigma_w: Vec<Vec<f64>>,
    pub sigma_v: Vec<Vec<f64>>,
    pub sigma_x0: Vec<Vec<f64>>,
    pub xhat0: Vec<f64>,
    pub split: SplitSection,
    pub horizon: HorizonSection,
    pub weights: WeightsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSection {
    pub n1: usize,
    pub n2: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonSection {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "Nc")]
    pub nc: usize,
    pub u_max: f64,
    pub phi_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsSection {
    #[serde(rename = "Wx")]
    pub wx: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "WxN")]
    pub wx_n: Vec<Vec<f64>>,
    #[serde(rename = "Wu")]
    pub wu: Vec<Vec<Vec<f64>>>,
}

fn nested_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ModelError> {
    let r = rows.len();
    if r == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err(ModelError::File(format!("{what} rows have unequal lengths")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(r, c, &flat))
}

/// Everything a run needs, validated and cross-checked.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: ValidatedModel,
    pub split: JordanSplit,
    pub horizon: HorizonConfig,
    pub weights: CostWeights,
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::File(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model file serializes")
    }

    /// Validate all sections and assemble the typed model bundle.
    pub fn build(&self) -> Result<LoadedModel, ModelError> {
        let model = SystemModel {
            a: nested_to_matrix(&self.a, "A")?,
            b: nested_to_matrix(&self.b, "B")?,
            c: nested_to_matrix(&self.c, "C")?,
            sigma_w: nested_to_matrix(&self.sigma_w, "sigma_w")?,
            sigma_v: nested_to_matrix(&self.sigma_v, "sigma_v")?,
            sigma_x0: nested_to_matrix(&self.sigma_x0, "sigma_x0")?,
            xhat0: DVector::from_vec(self.xhat0.clone()),
        };
        let model = validate_model(model)?;
        let split = JordanSplit::from_model(&model, self.split.n1, self.split.n2)?;
        let horizon = HorizonConfig {
            n_horizon: self.horizon.n,
            n_control: self.horizon.nc,
            u_max: self.horizon.u_max,
            phi_max: self.horizon.phi_max,
        };
        horizon.validate(split.kappa)?;
        let wx = self
            .weights
            .wx
            .iter()
            .map(|m| nested_to_matrix(m, "Wx"))
            .collect::<Result<Vec<_>, _>>()?;
        let wu = self
            .weights
            .wu
            .iter()
            .map(|m| nested_to_matrix(m, "Wu"))
            .collect::<Result<Vec<_>, _>>()?;
        let weights = CostWeights {
            wx,
            wx_n: nested_to_matrix(&self.weights.wx_n, "WxN")?,
            wu,
        };
        let (n, m, _p) = model.dims();
        weights.validate(n, m, horizon.n_horizon)?;
        Ok(LoadedModel {
            model,
            split,
            horizon,
            weights,
        })
    }
}

/// Sanity threshold used by tests for the exact stacking identity.
pub const LIFT_REL_TOL: f64 = 1e-10;

/// PBH stabilizability of an arbitrary pair (used for `(A, Σw^{1/2})`).
pub fn is_stabilizable_pair(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .all(|lam| lam.norm() < 1.0 - UNIT_CIRCLE_TOL || pbh_controllable_at(a, b, *lam))
}

/// PBH observability of `(A, C)`: full rank of `[A − λI; C]` at every eigenvalue.
pub fn is_observable_pair(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let p = c.nrows();
    a.clone().complex_eigenvalues().iter().all(|lam| {
        let mut pencil = DMatrix::<Complex<f64>>::zeros(n + p, n);
        pencil.view_mut((0, 0), (n, n)).copy_from(&to_complex(a));
        for i in 0..n {
            pencil[(i, i)] -= *lam;
        }
        pencil.view_mut((n, 0), (p, n)).copy_from(&to_complex(c));
        complex_rank(&pencil) == n
    })
}

/// Numerical-rank threshold re-exported for callers that report diagnostics.
pub fn rank_threshold() -> f64 {
    RANK_RTOL
}
