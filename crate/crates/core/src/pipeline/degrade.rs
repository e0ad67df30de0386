//! Degradation stage: zero-padded PSF convolution plus seeded Gaussian
//! noise, expressed through the same operator used for reconstruction.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::operator::LinearOperator;
use crate::pipeline::phantom::Phantom;

#[derive(Debug, Clone)]
pub struct DegradedObservation {
    pub pixels: DMatrix<f64>,
    pub psf: DMatrix<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Flattens an image row-major into the operator's vector convention.
pub fn flatten(img: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(img.nrows() * img.ncols(), |k, _| img[(k / img.ncols(), k % img.ncols())])
}

/// Inverse of [`flatten`].
pub fn unflatten(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::DimensionMismatch { expected: rows * cols, got: v.len() });
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| v[i * cols + j]))
}

/// Applies `g = PSF * pixels + N(0, noise_sigma^2 I)` with zero padding.
pub fn degrade(phantom: &Phantom, psf: &DMatrix<f64>, noise_sigma: f64, seed: u64) -> Result<DegradedObservation> {
    if noise_sigma < 0.0 {
        return Err(Error::invalid_param("noise_sigma", "must be non-negative"));
    }
    let rows = phantom.pixels.nrows();
    let cols = phantom.pixels.ncols();
    let op = LinearOperator::convolution2d(psf.clone(), rows, cols)?;
    let mut g = op.apply(&flatten(&phantom.pixels))?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in g.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += noise_sigma * e;
        }
    }
    Ok(DegradedObservation { pixels: unflatten(&g, rows, cols)?, psf: psf.clone(), noise_sigma, seed })
}
