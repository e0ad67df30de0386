//! Bayesian inference engines for linear inverse problems.
//!
//! The crate covers the full path from Gaussian exponential-family
//! coordinates through closed-form posteriors, Laplace approximation,
//! natural-gradient variational Bayes, unrolled shrinkage networks, and
//! stochastic forward passes, up to an end-to-end synthetic deconvolution
//! and segmentation pipeline.

pub mod error;
pub mod gaussian;
pub mod laplace;
pub mod model;
pub mod operator;
pub mod pipeline;
pub mod stochastic;
pub mod unrolled;
pub mod util;
pub mod vba;

pub use error::{Error, Result};
pub use gaussian::{GaussianMeanCov, GaussianMoments, GaussianNat};
pub use model::{LinearGaussianModel, PosteriorGaussian};
pub use operator::LinearOperator;
