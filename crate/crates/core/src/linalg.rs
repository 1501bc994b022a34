//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Maximum absolute asymmetry `max |A - A^T|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Checks that `m` is square, symmetric and PSD within `tol` (smallest
/// eigenvalue allowed down to `-tol`).
pub fn check_symmetric_psd(m: &DMatrix<f64>, tol: f64, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Validation(format!("{what} must be square")));
    }
    if asymmetry(m) > tol {
        return Err(Error::Validation(format!(
            "{what} is not symmetric within {tol:.1e}"
        )));
    }
    let eigs = m.clone().symmetric_eigenvalues();
    let min_eig = eigs.min();
    if min_eig < -tol {
        return Err(Error::Validation(format!(
            "{what} is not PSD: smallest eigenvalue {min_eig:.3e}"
        )));
    }
    Ok(())
}

/// Checks that `m` is symmetric PD: smallest eigenvalue strictly above `floor`.
pub fn check_symmetric_pd(m: &DMatrix<f64>, floor: f64, what: &str) -> Result<()> {
    check_symmetric_psd(m, 1e-10, what)?;
    let min_eig = m.clone().symmetric_eigenvalues().min();
    if min_eig <= floor {
        return Err(Error::Validation(format!(
            "{what} is not PD: smallest eigenvalue {min_eig:.3e} <= {floor:.1e}"
        )));
    }
    Ok(())
}

/// Symmetric PSD square root via eigendecomposition.
///
/// Eigenvalues in `[-clamp, 0)` are treated as round-off and clamped to zero;
/// anything below `-clamp` is a validation error.
pub fn psd_sqrt(m: &DMatrix<f64>, clamp: f64) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Validation("psd_sqrt: matrix must be square".into()));
    }
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -clamp {
            return Err(Error::Validation(format!(
                "psd_sqrt: eigenvalue {lambda:.3e} below -{clamp:.1e}"
            )));
        }
        roots[i] = lambda.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Quadratic form `x^T M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}
