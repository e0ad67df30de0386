//! Gaussian stochastic forward passes through layered networks: per-layer
//! additive noise with variance `tau`, Monte Carlo predictive summaries with
//! splittable per-sample streams, and exact analytic moment propagation for
//! identity-activation stacks.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::unrolled::soft_threshold_scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    SoftThreshold(f64),
    Relu,
}

impl Activation {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::SoftThreshold(t) => soft_threshold_scalar(v, *t),
            Activation::Relu => v.max(0.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
    /// Variance of the isotropic Gaussian perturbation added to this layer's
    /// pre-activation; zero means no noise is drawn at all.
    pub tau: f64,
}

impl LayerSpec {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>, activation: Activation, tau: f64) -> Result<Self> {
        if bias.len() != weights.nrows() {
            return Err(Error::DimensionMismatch { expected: weights.nrows(), got: bias.len() });
        }
        if tau < 0.0 {
            return Err(Error::invalid_param("tau", "noise variance must be non-negative"));
        }
        if let Activation::SoftThreshold(t) = activation {
            if t < 0.0 {
                return Err(Error::invalid_param("threshold", "must be non-negative"));
            }
        }
        Ok(Self { weights, bias, activation, tau })
    }
}

fn check_layers(layers: &[LayerSpec], input_dim: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::invalid_param("layers", "need at least one layer"));
    }
    let mut dim = input_dim;
    for (i, layer) in layers.iter().enumerate() {
        if layer.weights.ncols() != dim {
            return Err(Error::Stage {
                stage: format!("layer {i}"),
                message: format!("expected input dim {dim}, got {}", layer.weights.ncols()),
            });
        }
        dim = layer.weights.nrows();
    }
    Ok(())
}

/// Noise-free forward pass: `z <- act(W z + b)` per layer.
pub fn deterministic_forward(layers: &[LayerSpec], x: &DVector<f64>) -> Result<DVector<f64>> {
    check_layers(layers, x.len())?;
    let mut z = x.clone();
    for layer in layers {
        let pre = &layer.weights * &z + &layer.bias;
        z = pre.map(|v| layer.activation.apply(v));
    }
    Ok(z)
}

/// One stochastic forward pass. The input is perturbed with variance `tau0`
/// and each layer's pre-activation with its own `tau`; layers (or an input)
/// with zero variance draw no random numbers, so `tau == 0` everywhere
/// reproduces [`deterministic_forward`] bit for bit.
pub fn sample_forward(layers: &[LayerSpec], x: &DVector<f64>, tau0: f64, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    check_layers(layers, x.len())?;
    if tau0 < 0.0 {
        return Err(Error::invalid_param("tau0", "noise variance must be non-negative"));
    }
    let mut z = x.clone();
    if tau0 > 0.0 {
        let sd = tau0.sqrt();
        for v in z.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += sd * e;
        }
    }
    for layer in layers {
        let mut pre = &layer.weights * &z + &layer.bias;
        if layer.tau > 0.0 {
            let sd = layer.tau.sqrt();
            for v in pre.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += sd * e;
            }
        }
        z = pre.map(|v| layer.activation.apply(v));
    }
    Ok(z)
}

#[derive(Debug, Clone)]
pub struct PredictiveSummary {
    pub mean: DVector<f64>,
    /// Unbiased per-component sample variance.
    pub variance: DVector<f64>,
    pub samples_used: usize,
}

/// Monte Carlo predictive mean and variance over `n` stochastic passes.
///
/// Each sample runs on its own ChaCha stream derived from `seed`, so the
/// result is independent of evaluation order and reproducible per sample.
/// Accumulation uses Welford's algorithm; with all noise off the variance is
/// exactly zero.
pub fn mc_predictive(
    layers: &[LayerSpec],
    x: &DVector<f64>,
    tau0: f64,
    n: usize,
    seed: u64,
) -> Result<PredictiveSummary> {
    if n < 2 {
        return Err(Error::invalid_param("n", "need at least two samples for a variance"));
    }
    check_layers(layers, x.len())?;
    let out_dim = layers.last().unwrap().weights.nrows();
    let mut mean: DVector<f64> = DVector::zeros(out_dim);
    let mut m2: DVector<f64> = DVector::zeros(out_dim);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let sample = sample_forward(layers, x, tau0, &mut rng)?;
        let count = (i + 1) as f64;
        for j in 0..out_dim {
            let delta = sample[j] - mean[j];
            mean[j] += delta / count;
            m2[j] += delta * (sample[j] - mean[j]);
        }
    }
    let variance = m2.map(|v| v / (n as f64 - 1.0));
    Ok(PredictiveSummary { mean, variance, samples_used: n })
}

#[derive(Debug, Clone)]
pub struct PropagatedGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Exact moment propagation for identity-activation stacks:
/// `mean <- W mean + b`, `cov <- W cov W^T + tau I` per layer, starting from
/// `cov = tau0 I`. Errors if any layer has a nonlinear activation.
pub fn analytic_propagation(layers: &[LayerSpec], x: &DVector<f64>, tau0: f64) -> Result<PropagatedGaussian> {
    check_layers(layers, x.len())?;
    if tau0 < 0.0 {
        return Err(Error::invalid_param("tau0", "noise variance must be non-negative"));
    }
    if layers.iter().any(|l| l.activation != Activation::Identity) {
        return Err(Error::InvalidModel(
            "analytic propagation is exact only for identity activations".into(),
        ));
    }
    let mut mean = x.clone();
    let mut cov = DMatrix::identity(x.len(), x.len()) * tau0;
    for layer in layers {
        mean = &layer.weights * &mean + &layer.bias;
        let d = layer.weights.nrows();
        cov = &layer.weights * cov * layer.weights.transpose() + DMatrix::identity(d, d) * layer.tau;
    }
    Ok(PropagatedGaussian { mean, covariance: cov })
}
