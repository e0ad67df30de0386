//! Shared fixtures for the criterion benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use invert_core::operator::{gaussian_kernel, LinearOperator};
use invert_core::LinearGaussianModel;

/// A seeded dense model instance with a random tall operator.
pub fn dense_instance(m: usize, n: usize, seed: u64) -> (LinearGaussianModel, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let g = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
    let model = LinearGaussianModel::new(LinearOperator::dense(h), 0.01, 1.0).unwrap();
    (model, g)
}

/// A seeded square deconvolution instance at `side x side`.
pub fn conv_instance(side: usize, seed: u64) -> (LinearGaussianModel, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psf = gaussian_kernel(3, 1.0).unwrap();
    let op = LinearOperator::convolution2d(psf, side, side).unwrap();
    let f = DVector::from_fn(side * side, |_, _| rng.gen_range(0.0..1.0));
    let g = op.apply(&f).unwrap();
    let model = LinearGaussianModel::new(op, 1e-4, 1.0).unwrap();
    (model, g)
}
