//! Small dense linear-algebra helpers shared by the other modules.

use nalgebra::{Complex, DMatrix, DVector};

use crate::tol::RANK_RTOL;

/// `(M + Mᵀ)/2`; used after covariance updates to suppress round-off drift.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest singular value (spectral norm).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Smallest singular value.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.min()
}

/// `A^k` by repeated multiplication; `A^0 = I`.
pub fn mat_pow(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::identity(n, n);
    for _ in 0..k {
        out = &out * a;
    }
    out
}

/// Numerical rank with the crate-wide relative singular-value threshold.
pub fn numeric_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let cutoff = RANK_RTOL * sv.max();
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Numerical rank of a complex matrix (same threshold convention).
pub fn complex_rank(m: &DMatrix<Complex<f64>>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let cutoff = RANK_RTOL * sv.max();
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Lift a real matrix into the complex field.
pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    m.map(|x| Complex::new(x, 0.0))
}

/// Symmetric eigenvalues of `(M + Mᵀ)/2`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut ev = symmetrize(m).symmetric_eigenvalues();
    ev.as_mut_slice()
        .sort_by(|a, b| a.partial_cmp(b).expect("eigenvalue NaN"));
    ev
}

/// Factor `L` of a symmetric PSD matrix with `LLᵀ = M`, built from the
/// eigendecomposition with negative eigenvalues clipped at zero. Accepts
/// singular and slightly indefinite inputs, unlike a Cholesky factor.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut l = eig.eigenvectors;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = if lam > 0.0 { lam.sqrt() } else { 0.0 };
        l.column_mut(j).scale_mut(s);
    }
    l
}

/// Moore–Penrose pseudoinverse through the SVD.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let cutoff = RANK_RTOL * svd.singular_values.max();
    svd.pseudo_inverse(cutoff)
        .expect("SVD computed with singular vectors")
}

/// Solve `M x = b` for symmetric positive-definite `M` via Cholesky,
/// falling back to the pseudoinverse when the factorization fails.
pub fn spd_solve_matrix(m: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    match symmetrize(m).cholesky() {
        Some(ch) => ch.solve(b),
        None => pinv(m) * b,
    }
}

/// Max absolute entry; zero for empty matrices.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()))
}

/// Block-diagonal matrix from `count` copies of `block`.
pub fn block_diag_repeat(block: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * count, c * count);
    for k in 0..count {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

/// Block-diagonal matrix from a list of (possibly different) square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let total_r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let total_c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(total_r, total_c);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), b.shape()).copy_from(b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mat_pow_basics() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert_eq!(mat_pow(&a, 0), DMatrix::identity(2, 2));
        assert_eq!(mat_pow(&a, 4), DMatrix::identity(2, 2));
    }

    #[test]
    fn psd_factor_reconstructs() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let l = psd_factor(&m);
        assert_abs_diff_eq!(&l * l.transpose(), m, epsilon = 1e-12);
    }

    #[test]
    fn psd_factor_clips_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_factor(&m);
        assert_abs_diff_eq!(&l * l.transpose(), m, epsilon = 1e-12);
        let zero = DMatrix::zeros(3, 3);
        assert_eq!(psd_factor(&zero), zero);
    }

    #[test]
    fn rank_thresholding() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
        assert_eq!(numeric_rank(&m), 1);
        assert_eq!(numeric_rank(&DMatrix::<f64>::identity(3, 3)), 3);
    }

    #[test]
    fn pinv_of_full_row_rank() {
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        let p = pinv(&m);
        assert_abs_diff_eq!(&m * &p, DMatrix::identity(2, 2), epsilon = 1e-12);
    }
}
