//! Dense linear-algebra kernels: full Householder QR, SVD pseudo-inverse,
//! inertia-weighted (dynamically consistent) pseudo-inverse, central
//! difference Jacobians/Hessians and a PSD test.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative pivot threshold below which a triangular factor is rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Relative singular-value cutoff used by [`svd_pinv`] (scaled by `max(n, k) * sigma_max`).
pub const PINV_RCOND: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is rank deficient (rank {rank} < {expected})")]
    RankDeficient { rank: usize, expected: usize },
    #[error("weight matrix is not symmetric positive definite")]
    SingularWeight,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("matrix not symmetric (asymmetry {asymmetry:e} > tol {tol:e})")]
    NotSymmetric { asymmetry: f64, tol: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Full QR factorization `m = q * [r; 0]` of an `n x k` matrix with `n >= k`.
#[derive(Debug, Clone)]
pub struct QrFactorization {
    /// Orthogonal `n x n` factor.
    pub q: Matrix,
    /// Upper triangular `k x k` factor with a nonnegative diagonal.
    pub r: Matrix,
    pub k: usize,
    pub n: usize,
}

impl QrFactorization {
    /// `q * [r; 0]`.
    pub fn reconstruct(&self) -> Matrix {
        self.q.columns(0, self.k) * &self.r
    }
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn ensure_finite(m: &Matrix, what: &str) -> Result<(), NumericsError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite(what.to_string()))
    }
}

/// Householder QR returning the full orthogonal factor.
///
/// The sign of every Householder column is fixed so that `diag(r) >= 0`,
/// which makes the factorization unique for full-column-rank input.
pub fn qr_full(m: &Matrix) -> Result<QrFactorization, NumericsError> {
    let (n, k) = m.shape();
    if k == 0 || n < k {
        return Err(NumericsError::DimensionMismatch(format!(
            "qr_full needs n >= k >= 1, got {n}x{k}"
        )));
    }
    ensure_finite(m, "qr_full input")?;

    let mut r = m.clone();
    let mut q = Matrix::identity(n, n);
    for j in 0..k {
        let x = r.view((j, j), (n - j, 1)).clone_owned();
        let norm = x.norm();
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = v.norm();
        if vnorm == 0.0 {
            continue;
        }
        v /= vnorm;
        // r[j.., j..] -= 2 v (v^T r[j.., j..])
        let mut block = r.view_mut((j, j), (n - j, k - j));
        let proj = v.transpose() * &block;
        block -= 2.0 * &v * proj;
        // q[.., j..] -= 2 (q[.., j..] v) v^T
        let mut qblock = q.view_mut((0, j), (n, n - j));
        let qv = &qblock * &v;
        qblock -= 2.0 * qv * v.transpose();
    }

    let mut r_top = r.view((0, 0), (k, k)).clone_owned();
    for j in 0..k {
        for i in (j + 1)..k {
            r_top[(i, j)] = 0.0;
        }
        if r_top[(j, j)] < 0.0 {
            r_top.row_mut(j).neg_mut();
            q.column_mut(j).neg_mut();
        }
    }

    let diag: Vec<f64> = (0..k).map(|i| r_top[(i, i)].abs()).collect();
    let largest = diag.iter().cloned().fold(0.0, f64::max);
    let rank = diag
        .iter()
        .filter(|d| largest > 0.0 && **d >= RANK_TOL * largest)
        .count();
    if rank < k {
        return Err(NumericsError::RankDeficient { rank, expected: k });
    }

    Ok(QrFactorization { q, r: r_top, k, n })
}

/// Thin SVD `m = u * diag(s) * v^T`. Backed by faer; nalgebra's SVD loses
/// accuracy on some exactly rank-deficient inputs.
fn thin_svd(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (n, k) = m.shape();
    let fm = faer::Mat::<f64>::from_fn(n, k, |i, j| m[(i, j)]);
    match fm.thin_svd() {
        Ok(svd) => {
            let (u, v) = (svd.U(), svd.V());
            let s = svd.S().column_vector();
            let r = s.nrows();
            (
                Matrix::from_fn(n, r, |i, j| u[(i, j)]),
                (0..r).map(|i| s[i]).collect(),
                Matrix::from_fn(k, r, |i, j| v[(i, j)]),
            )
        }
        Err(_) => {
            let svd = m.clone().svd(true, true);
            (
                svd.u.expect("u requested"),
                svd.singular_values.iter().cloned().collect(),
                svd.v_t.expect("v_t requested").transpose(),
            )
        }
    }
}

/// Moore-Penrose pseudo-inverse through the SVD.
///
/// Singular values at or below `max(n, k) * sigma_max * 1e-12` are treated as zero.
pub fn svd_pinv(m: &Matrix) -> Matrix {
    let (n, k) = m.shape();
    if n == 0 || k == 0 {
        return Matrix::zeros(k, n);
    }
    let (u, s, v) = thin_svd(m);
    let sigma_max = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = n.max(k) as f64 * sigma_max * PINV_RCOND;

    let mut out = Matrix::zeros(k, n);
    for (i, &si) in s.iter().enumerate() {
        if si > cutoff && si > 0.0 {
            out += (v.column(i) / si) * u.column(i).transpose();
        }
    }
    out
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s = thin_svd(m).1;
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// 2-norm condition number `sigma_max / sigma_min` over the `min(rows, cols)`
/// singular values; infinite when the smallest one is zero.
pub fn condition_number(m: &Matrix) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => f64::INFINITY,
    }
}

fn symmetric_asymmetry(m: &Matrix) -> f64 {
    max_abs(&(m - m.transpose()))
}

/// Cholesky factor of an SPD matrix, or `SingularWeight`.
pub fn spd_factor(a: &Matrix) -> Result<Cholesky<f64, nalgebra::Dyn>, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::DimensionMismatch(format!(
            "weight matrix must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    ensure_finite(a, "weight matrix")?;
    if symmetric_asymmetry(a) > 1e-9 * (1.0 + max_abs(a)) {
        return Err(NumericsError::SingularWeight);
    }
    let sym = (a + a.transpose()) * 0.5;
    sym.cholesky().ok_or(NumericsError::SingularWeight)
}

/// Inertia-weighted right inverse `A^-1 W^T (W A^-1 W^T)^-1` of a `k x n` matrix.
pub fn dyn_consistent_pinv(w: &Matrix, a: &Matrix) -> Result<Matrix, NumericsError> {
    let (k, n) = w.shape();
    if a.nrows() != n {
        return Err(NumericsError::DimensionMismatch(format!(
            "W is {k}x{n} but A is {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let chol = spd_factor(a)?;
    if k == 0 {
        return Ok(Matrix::zeros(n, 0));
    }
    ensure_finite(w, "W")?;
    if k > n {
        return Err(NumericsError::RankDeficient { rank: n, expected: k });
    }
    // With A = L L^T and B = L^-1 W^T = Q R, the inverse is L^-T Q R^-T.
    // Working on B avoids squaring the condition number in W A^-1 W^T.
    let l = chol.l();
    let b = l
        .solve_lower_triangular(&w.transpose())
        .ok_or(NumericsError::SingularWeight)?;
    let qr = b.qr();
    let (q, r) = (qr.q(), qr.r());
    let diag: Vec<f64> = (0..k).map(|i| r[(i, i)].abs()).collect();
    let largest = diag.iter().cloned().fold(0.0, f64::max);
    let rank = diag.iter().filter(|d| **d > 1e-6 * largest).count();
    if rank < k {
        return Err(NumericsError::RankDeficient { rank, expected: k });
    }
    let y_t = r
        .solve_upper_triangular(&q.transpose())
        .ok_or(NumericsError::RankDeficient { rank, expected: k })?;
    l.transpose()
        .solve_upper_triangular(&y_t.transpose())
        .ok_or(NumericsError::SingularWeight)
}

/// Per-coordinate default finite-difference step `1e-4 * (1 + |p_i|)`.
pub fn default_steps(p0: &Vector) -> Vector {
    p0.map(|x| 1e-4 * (1.0 + x.abs()))
}

/// Step-size policy for the finite-difference routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdStep {
    /// `1e-4 * (1 + |p_i|)` per coordinate.
    Auto,
    Uniform(f64),
}

impl FdStep {
    fn steps(self, p0: &Vector) -> Result<Vector, NumericsError> {
        match self {
            FdStep::Auto => Ok(default_steps(p0)),
            FdStep::Uniform(h) if h > 0.0 && h.is_finite() => Ok(Vector::from_element(p0.len(), h)),
            FdStep::Uniform(h) => Err(NumericsError::InvalidArgument(format!(
                "finite-difference step must be positive, got {h}"
            ))),
        }
    }
}

fn checked(v: f64) -> Result<f64, NumericsError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NumericsError::NonFinite("function evaluation".into()))
    }
}

/// Central-difference Hessian of a scalar function, symmetrized.
pub fn finite_diff_hessian<F>(f: F, p0: &Vector, step: FdStep) -> Result<Matrix, NumericsError>
where
    F: Fn(&Vector) -> f64,
{
    let d = p0.len();
    let h = step.steps(p0)?;
    let eval = |dp: &[(usize, f64)]| -> Result<f64, NumericsError> {
        let mut p = p0.clone();
        for &(i, s) in dp {
            p[i] += s;
        }
        checked(f(&p))
    };
    let f0 = eval(&[])?;
    let mut hess = Matrix::zeros(d, d);
    for i in 0..d {
        let hi = h[i];
        let fp = eval(&[(i, hi)])?;
        let fm = eval(&[(i, -hi)])?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in (i + 1)..d {
            let hj = h[j];
            let fpp = eval(&[(i, hi), (j, hj)])?;
            let fpm = eval(&[(i, hi), (j, -hj)])?;
            let fmp = eval(&[(i, -hi), (j, hj)])?;
            let fmm = eval(&[(i, -hi), (j, -hj)])?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// Central-difference Jacobian of a vector function.
pub fn finite_diff_jacobian<F, E>(f: F, p0: &Vector, step: FdStep) -> Result<Matrix, E>
where
    F: Fn(&Vector) -> Result<Vector, E>,
    E: From<NumericsError>,
{
    let h = step.steps(p0)?;
    let f0 = f(p0)?;
    let mut jac = Matrix::zeros(f0.len(), p0.len());
    for j in 0..p0.len() {
        let mut pp = p0.clone();
        pp[j] += h[j];
        let mut pm = p0.clone();
        pm[j] -= h[j];
        let col = (f(&pp)? - f(&pm)?) / (2.0 * h[j]);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite("jacobian column".into()).into());
        }
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Result of [`psd_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdVerdict {
    pub is_psd: bool,
    pub min_eigenvalue: f64,
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Symmetrize `m` if its asymmetry is within `tol`, otherwise `NotSymmetric`.
pub fn symmetrize_within(m: &Matrix, tol: f64) -> Result<Matrix, NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::DimensionMismatch(format!(
            "expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite(m, "symmetric matrix")?;
    let asymmetry = symmetric_asymmetry(m);
    if asymmetry > tol {
        return Err(NumericsError::NotSymmetric { asymmetry, tol });
    }
    Ok((m + m.transpose()) * 0.5)
}

/// PSD test: `is_psd` iff the smallest eigenvalue is `>= -tol`.
pub fn psd_check(m: &Matrix, tol: f64) -> Result<PsdVerdict, NumericsError> {
    if !(tol >= 0.0) {
        return Err(NumericsError::InvalidArgument(format!("tolerance must be nonnegative, got {tol}")));
    }
    let sym = symmetrize_within(m, tol)?;
    let min_eigenvalue = symmetric_eigenvalues(&sym).first().cloned().unwrap_or(0.0);
    Ok(PsdVerdict {
        is_psd: min_eigenvalue >= -tol,
        min_eigenvalue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random(n: usize, k: usize, seed: &mut u64) -> Matrix {
        Matrix::from_fn(n, k, |_, _| lcg(seed))
    }

    #[test]
    fn qr_identity() {
        let qr = qr_full(&Matrix::identity(2, 2)).unwrap();
        assert!((qr.r.clone() - Matrix::identity(2, 2)).abs().max() < 1e-14);
        assert!((qr.q.clone() - Matrix::identity(2, 2)).abs().max() < 1e-14);
    }

    #[test]
    fn qr_permutation_case() {
        let m = dmatrix![0.0; 1.0];
        let qr = qr_full(&m).unwrap();
        assert!((qr.reconstruct() - &m).abs().max() < 1e-10);
        assert!((qr.r[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn qr_random_tall() {
        let mut seed = 7;
        let m = random(6, 2, &mut seed);
        let qr = qr_full(&m).unwrap();
        let qtq = qr.q.transpose() * &qr.q;
        assert!((qtq - Matrix::identity(6, 6)).abs().max() < 1e-10);
        assert!((qr.reconstruct() - &m).abs().max() < 1e-10);
        for i in 0..2 {
            assert!(qr.r[(i, i)] >= 0.0);
        }
        assert_eq!(qr.r[(1, 0)], 0.0);
    }

    #[test]
    fn qr_rejects_rank_deficient() {
        let m = dmatrix![1.0, 2.0; 2.0, 4.0; 3.0, 6.0];
        assert!(matches!(qr_full(&m), Err(NumericsError::RankDeficient { rank: 1, expected: 2 })));
        assert!(matches!(qr_full(&Matrix::zeros(3, 1)), Err(NumericsError::RankDeficient { .. })));
    }

    #[test]
    fn qr_rejects_wide() {
        assert!(matches!(qr_full(&Matrix::zeros(1, 2)), Err(NumericsError::DimensionMismatch(_))));
    }

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let m = dmatrix![4.0, 1.0; 2.0, 3.0];
        let inv = m.clone().try_inverse().unwrap();
        assert!((svd_pinv(&m) - inv).abs().max() < 1e-9);
    }

    #[test]
    fn pinv_of_zero_is_zero() {
        let p = svd_pinv(&Matrix::zeros(3, 2));
        assert_eq!(p.shape(), (2, 3));
        assert_eq!(max_abs(&p), 0.0);
    }

    #[test]
    fn pinv_of_diagonal_wide() {
        let m = dmatrix![1.0, 0.0, 0.0; 0.0, 2.0, 0.0];
        let expected = dmatrix![1.0, 0.0; 0.0, 0.5; 0.0, 0.0];
        let p = svd_pinv(&m);
        assert!((&p - expected).abs().max() < 1e-12);
        assert!((&m * &p * &m - &m).abs().max() < 1e-12);
        assert!((&p * &m * &p - &p).abs().max() < 1e-12);
    }

    #[test]
    fn dyn_pinv_unweighted_reduces_to_right_inverse() {
        let mut seed = 3;
        let w = random(2, 4, &mut seed);
        let plain = w.transpose() * (&w * w.transpose()).try_inverse().unwrap();
        let dc = dyn_consistent_pinv(&w, &Matrix::identity(4, 4)).unwrap();
        assert!((dc - plain).abs().max() < 1e-10);
    }

    #[test]
    fn dyn_pinv_scalar() {
        let r = dyn_consistent_pinv(&dmatrix![2.0], &dmatrix![4.0]).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dyn_pinv_random_left_identity() {
        let mut seed = 11;
        let w = random(2, 5, &mut seed);
        let b = random(5, 5, &mut seed);
        let a = &b * b.transpose() + Matrix::identity(5, 5) * 0.5;
        let r = dyn_consistent_pinv(&w, &a).unwrap();
        assert!((&w * r - Matrix::identity(2, 2)).abs().max() < 1e-9);
    }

    #[test]
    fn dyn_pinv_errors() {
        let w = dmatrix![1.0, 0.0];
        let not_spd = dmatrix![1.0, 0.0; 0.0, -1.0];
        assert_eq!(dyn_consistent_pinv(&w, &not_spd), Err(NumericsError::SingularWeight));
        let w2 = dmatrix![1.0, 1.0; 2.0, 2.0];
        assert!(matches!(
            dyn_consistent_pinv(&w2, &Matrix::identity(2, 2)),
            Err(NumericsError::RankDeficient { .. })
        ));
    }

    #[test]
    fn hessian_of_quadratic_form() {
        let m = dmatrix![2.0, 0.5, -1.0; 0.5, 3.0, 0.25; -1.0, 0.25, 1.5];
        let mm = m.clone();
        let f = move |p: &Vector| (p.transpose() * &mm * p)[(0, 0)];
        let p0 = Vector::from_vec(vec![0.3, -0.2, 1.1]);
        let h = finite_diff_hessian(f, &p0, FdStep::Uniform(1e-4)).unwrap();
        let expected = &m * 2.0;
        assert!((&h - &expected).abs().max() <= 1e-5 * max_abs(&expected));
    }

    #[test]
    fn hessian_of_constant_is_zero() {
        let h = finite_diff_hessian(|_| 4.2, &Vector::from_vec(vec![1.0, 2.0]), FdStep::Auto).unwrap();
        assert_eq!(max_abs(&h), 0.0);
    }

    #[test]
    fn hessian_of_sin_product() {
        let f = |p: &Vector| p[0].sin() * p[1];
        let h = finite_diff_hessian(f, &Vector::from_vec(vec![0.0, 1.0]), FdStep::Auto).unwrap();
        let expected = dmatrix![0.0, 1.0; 1.0, 0.0];
        assert!((h - expected).abs().max() < 1e-5);
    }

    #[test]
    fn hessian_non_finite() {
        let f = |p: &Vector| 1.0 / p[0];
        let r = finite_diff_hessian(f, &Vector::from_vec(vec![0.0]), FdStep::Auto);
        assert!(matches!(r, Err(NumericsError::NonFinite(_))));
        assert!(matches!(
            finite_diff_hessian(|_| 0.0, &Vector::zeros(1), FdStep::Uniform(0.0)),
            Err(NumericsError::InvalidArgument(_))
        ));
    }

    #[test]
    fn psd_examples() {
        let v = psd_check(&Matrix::identity(3, 3), 1e-9).unwrap();
        assert!(v.is_psd);
        assert!((v.min_eigenvalue - 1.0).abs() < 1e-14);

        let v = psd_check(&dmatrix![1.0, 0.0; 0.0, -1.0], 1e-9).unwrap();
        assert!(!v.is_psd);
        assert!((v.min_eigenvalue + 1.0).abs() < 1e-14);

        let v = psd_check(&dmatrix![2.0, 1.0; 1.0, 2.0], 1e-9).unwrap();
        assert!(v.is_psd);
        assert!((v.min_eigenvalue - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psd_rejects_asymmetric() {
        let r = psd_check(&dmatrix![1.0, 1.0; 0.0, 1.0], 1e-9);
        assert!(matches!(r, Err(NumericsError::NotSymmetric { .. })));
    }

    #[test]
    fn condition_number_of_diagonal() {
        let c = condition_number(&dmatrix![1.0, 0.0; 0.0, 1e-7]);
        assert!((c - 1e7).abs() / 1e7 < 1e-9);
        assert!(condition_number(&Matrix::zeros(2, 2)).is_infinite());
    }
}
