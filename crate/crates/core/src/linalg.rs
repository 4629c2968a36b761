//! Small dense symmetric helpers (f64 eigen-solves via nalgebra).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Eigen-decomposition of a symmetric row-major `n×n` matrix.
pub fn sym_eigen<T: Scalar>(a: &[T], n: usize) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[i * n + j].f64() + a[j * n + i].f64()));
    SymmetricEigen::new(m)
}

/// Clamps tiny negative eigenvalues (≥ −1e−10) to zero; larger violations are errors.
pub fn clamp_psd<T: Scalar>(mat: Vec<Vec<T>>) -> Result<Vec<Vec<T>>> {
    let n = mat.len();
    let flat: Vec<T> = mat.iter().flatten().copied().collect();
    let eig = sym_eigen(&flat, n);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Ok(mat);
    }
    if min < -1e-10 {
        return Err(Error::Numerical(format!("covariance is not PSD (eigenvalue {min:e})")));
    }
    log::warn!("clamping covariance eigenvalue {min:e} to 0");
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let rec = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Ok((0..n).map(|i| (0..n).map(|j| T::of(rec[(i, j)])).collect()).collect())
}
