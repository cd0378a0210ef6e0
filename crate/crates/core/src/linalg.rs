//! Small dense linear-algebra helpers over [`Real`] scalars.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::{lit, Real};

/// Relative tolerance used for symmetry checks: `|Aᵢⱼ − Aⱼᵢ| ≤ tol·(1 + max|Aᵢⱼ|)`.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Absolute eigenvalue tolerance for semidefiniteness tests.
pub const EIGEN_TOL: f64 = 1e-10;

pub fn check_square<T: Real>(m: &DMatrix<T>, what: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(what, m.nrows(), m.ncols()));
    }
    Ok(())
}

pub fn is_symmetric<T: Real>(m: &DMatrix<T>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = T::one() + m.amax();
    let tol = lit::<T>(SYMMETRY_TOL) * scale;
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

pub fn check_symmetric<T: Real>(m: &DMatrix<T>, what: &'static str) -> Result<()> {
    check_square(m, what)?;
    if !is_symmetric(m) {
        return Err(Error::NotSymmetric(what));
    }
    Ok(())
}

/// Cholesky factor of a symmetric matrix, `None` when it is not positive definite.
pub fn cholesky<T: Real>(m: &DMatrix<T>) -> Option<Cholesky<T, Dyn>> {
    let chol = m.clone().cholesky()?;
    // nalgebra accepts tiny or subnormal pivots; treat those as failures.
    let l = chol.l_dirty();
    let ok = (0..l.nrows()).all(|i| l[(i, i)] > T::zero() && l[(i, i)].is_finite());
    ok.then_some(chol)
}

/// `log det M` from a Cholesky factor of `M`.
pub fn log_det<T: Real>(chol: &Cholesky<T, Dyn>) -> T {
    let l = chol.l_dirty();
    let two = lit::<T>(2.0);
    (0..l.nrows()).fold(T::zero(), |acc, i| acc + two * l[(i, i)].ln())
}

/// `xᵀ M⁻¹ x` using a Cholesky factor of `M`.
pub fn inverse_quadratic_form<T: Real>(chol: &Cholesky<T, Dyn>, x: &DVector<T>) -> T {
    let y = chol.solve(x);
    x.dot(&y)
}

/// `Tr(A B)` without forming the product.
pub fn trace_of_product<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let mut acc = T::zero();
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub fn symmetric_eigenvalues<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    let sym = (m + m.transpose()) * lit::<T>(0.5);
    sym.symmetric_eigenvalues()
}

/// True when every eigenvalue is `≤ EIGEN_TOL`.
pub fn is_negative_semidefinite<T: Real>(m: &DMatrix<T>) -> bool {
    let tol = lit::<T>(EIGEN_TOL);
    symmetric_eigenvalues(m).iter().all(|&l| l <= tol)
}

/// Moore-Penrose pseudoinverse of a symmetric matrix via its eigendecomposition.
pub fn symmetric_pseudo_inverse<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let sym = (m + m.transpose()) * lit::<T>(0.5);
    let eig = sym.symmetric_eigen();
    let cutoff = lit::<T>(EIGEN_TOL) * (T::one() + eig.eigenvalues.amax());
    let inv = eig
        .eigenvalues
        .map(|l| if l.abs() > cutoff { T::one() / l } else { T::zero() });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

pub fn is_zero<T: Real>(m: &DMatrix<T>) -> bool {
    m.iter().all(|v| *v == T::zero())
}

pub fn vec_is_zero<T: Real>(v: &DVector<T>) -> bool {
    v.iter().all(|x| *x == T::zero())
}

/// Builds a matrix from row-major nested rows.
pub fn matrix_from_rows<T: Real>(rows: &[Vec<T>]) -> Result<DMatrix<T>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::dim("matrix row", ncols, bad.len()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows<T: Real>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn log_det_matches_determinant() {
        let m = dmatrix![4.0, 1.0; 1.0, 3.0];
        let chol = cholesky(&m).unwrap();
        assert!((log_det(&chol) - 11.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        assert!(cholesky(&dmatrix![1.0, 2.0; 2.0, 1.0]).is_none());
        assert!(cholesky(&dmatrix![-0.5]).is_none());
    }

    #[test]
    fn symmetry_tolerance_is_relative() {
        let mut m = dmatrix![1e6, 1.0; 1.0, 2.0];
        m[(0, 1)] += 1e-7;
        assert!(is_symmetric(&m));
        m[(0, 1)] += 1e-3;
        assert!(!is_symmetric(&m));
    }

    #[test]
    fn pseudo_inverse_of_singular() {
        let m = dmatrix![-1.0f64, 0.0; 0.0, 0.0];
        let p = symmetric_pseudo_inverse(&m);
        assert!((p[(0, 0)] + 1.0).abs() < 1e-14);
        assert!(p[(1, 1)].abs() < 1e-14);
    }

    #[test]
    fn trace_of_product_matches_full_product() {
        let a = dmatrix![1.0f64, 2.0; 3.0, 4.0];
        let b = dmatrix![0.5, -1.0; 2.0, 0.25];
        assert!((trace_of_product(&a, &b) - (&a * &b).trace()).abs() < 1e-14);
    }
}
