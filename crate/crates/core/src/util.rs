//! Small dense-matrix helpers used across the crate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// `(X + X^T) / 2`. Applied after every arithmetic update of a symmetric
/// matrix parameter so that rounding drift cannot break Cholesky.
pub fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

pub fn max_abs(x: &DMatrix<f64>) -> f64 {
    x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Checks `max|X - X^T| <= tol_rel * max|X|`.
pub fn is_symmetric(x: &DMatrix<f64>, tol_rel: f64) -> bool {
    if !x.is_square() {
        return false;
    }
    let scale = max_abs(x).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for i in 0..x.nrows() {
        for j in (i + 1)..x.ncols() {
            worst = worst.max((x[(i, j)] - x[(j, i)]).abs());
        }
    }
    worst <= tol_rel * scale
}

/// Cholesky factorization as the positive-definiteness test; the single
/// numeric pathway for determinants and inversions in this crate.
pub fn cholesky(x: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(x.clone())
        .ok_or_else(|| Error::InvalidDistribution("matrix is not positive definite".into()))
}

/// `ln det X` for symmetric positive definite `X`, via Cholesky.
pub fn ln_det_spd(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

pub fn check_finite_vec(name: &str, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}
