//! Reconstruction stage: dispatches the degraded observation to one of the
//! inference engines and returns the estimate with a per-pixel uncertainty
//! map (posterior standard deviation, or zeros for point methods).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{laplace_approximate, HessianSource};
use crate::model::LinearGaussianModel;
use crate::operator::{LinearOperator, DENSE_CAP};
use crate::pipeline::degrade::{flatten, unflatten, DegradedObservation};
use crate::unrolled::{build_ista_net, forward, spectral_norm_sq, UnrolledNet};
use crate::util;
use crate::vba::{mean_field_vba, run_vba, VbaConfig, VbaTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    ClosedForm,
    Laplace,
    Vba,
    MfVba,
    Unrolled,
}

impl Engine {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::ClosedForm => "closed_form",
            Engine::Laplace => "laplace",
            Engine::Vba => "vba",
            Engine::MfVba => "mf_vba",
            Engine::Unrolled => "unrolled",
        }
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_form" => Ok(Engine::ClosedForm),
            "laplace" => Ok(Engine::Laplace),
            "vba" => Ok(Engine::Vba),
            "mf_vba" => Ok(Engine::MfVba),
            "unrolled" => Ok(Engine::Unrolled),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected closed_form, laplace, vba, mf_vba, or unrolled"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructOptions {
    /// Natural-gradient step for the VBA engines. With conjugate models
    /// rho = 1 converges in a couple of iterations.
    pub rho: f64,
    pub max_iters: usize,
    /// Unrolled net depth when built analytically.
    pub layers: usize,
    pub threshold: f64,
    /// ISTA step; `None` picks 0.9 / ||H||^2.
    pub alpha: Option<f64>,
    /// Pre-trained net overriding the analytic construction.
    pub net: Option<UnrolledNet>,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self { rho: 1.0, max_iters: 10_000, layers: 64, threshold: 0.0, alpha: None, net: None }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub f_hat: DMatrix<f64>,
    /// Per-pixel posterior standard deviation; zeros for the unrolled net.
    pub uncertainty: DMatrix<f64>,
    /// Iteration trace when a VBA engine ran.
    pub trace: Option<VbaTrace>,
}

fn std_map(covariance: &DMatrix<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let diag = covariance.diagonal();
    for &v in diag.iter() {
        if v < -1e-12 {
            return Err(Error::Degenerate);
        }
    }
    unflatten(&diag.map(|v| v.max(0.0).sqrt()), rows, cols)
}

/// Runs the selected engine on the observation. Dense-factorization
/// engines are capped at 64x64 images.
pub fn reconstruct(
    obs: &DegradedObservation,
    sigma_eps2: f64,
    sigma_f2: f64,
    engine: Engine,
    opts: &ReconstructOptions,
) -> Result<Reconstruction> {
    let rows = obs.pixels.nrows();
    let cols = obs.pixels.ncols();
    let n = rows * cols;
    if n > DENSE_CAP {
        return Err(Error::Capacity(format!(
            "{rows}x{cols} image has {n} unknowns; engines are capped at {DENSE_CAP} (64x64)"
        )));
    }
    let op = LinearOperator::convolution2d(obs.psf.clone(), rows, cols)?;
    let g = flatten(&obs.pixels);

    match engine {
        Engine::ClosedForm => {
            let model = LinearGaussianModel::new(op, sigma_eps2, sigma_f2)?;
            let post = model.posterior_closed_form(&g)?;
            Ok(Reconstruction {
                f_hat: unflatten(&post.mean, rows, cols)?,
                uncertainty: std_map(&post.covariance, rows, cols)?,
                trace: None,
            })
        }
        Engine::Laplace => {
            let model = LinearGaussianModel::new(op, sigma_eps2, sigma_f2)?;
            let objective = model.neg_log_joint(g.clone())?;
            let hessian = model.posterior_precision()?;
            let chol = util::cholesky(&hessian)?;
            // the negative log joint is quadratic, so Newton from zero
            // lands on the MAP in one step; a second step mops up rounding
            let mut map = DVector::zeros(n);
            for _ in 0..2 {
                let grad = model.grad_neg_log_posterior(&g, &map)? / (2.0 * sigma_eps2);
                map -= chol.solve(&grad);
            }
            let fit = laplace_approximate(&objective, &map, HessianSource::Analytic(&hessian))?;
            Ok(Reconstruction {
                f_hat: unflatten(&fit.mean, rows, cols)?,
                uncertainty: std_map(&fit.covariance, rows, cols)?,
                trace: None,
            })
        }
        Engine::Vba | Engine::MfVba => {
            let model = LinearGaussianModel::new(op, sigma_eps2, sigma_f2)?;
            let cfg = VbaConfig {
                rho: opts.rho,
                max_iters: opts.max_iters,
                elbo_tol: 1e-12,
                grad_tol: 1e-9,
                ..VbaConfig::default()
            };
            let (q, trace) = if engine == Engine::Vba {
                let prior = crate::gaussian::GaussianMeanCov::new(
                    DVector::zeros(n),
                    DMatrix::identity(n, n) / sigma_f2,
                )?;
                run_vba(&model, &g, prior, &cfg)?
            } else {
                mean_field_vba(&model, &g, &cfg)?
            };
            if !trace.converged {
                let last = trace.records.last();
                return Err(Error::Divergence(format!(
                    "{} did not converge in {} iterations (final elbo {:?}); lower rho or raise max_iters",
                    engine.name(),
                    trace.records.len().saturating_sub(1),
                    last.map(|r| r.elbo),
                )));
            }
            Ok(Reconstruction {
                f_hat: unflatten(q.mean(), rows, cols)?,
                uncertainty: std_map(&q.covariance(), rows, cols)?,
                trace: Some(trace),
            })
        }
        Engine::Unrolled => {
            let net = match &opts.net {
                Some(net) => {
                    if net.input_dim() != n || net.state_dim() != n {
                        return Err(Error::DimensionMismatch { expected: n, got: net.input_dim() });
                    }
                    net.clone()
                }
                None => {
                    let alpha = match opts.alpha {
                        Some(a) => a,
                        None => 0.9 / spectral_norm_sq(&op, 200, 0x5eed)?,
                    };
                    build_ista_net(&op, alpha, opts.threshold, opts.layers, true)?.0
                }
            };
            let (f_hat, _) = forward(&net, &g, None)?;
            Ok(Reconstruction {
                f_hat: unflatten(&f_hat, rows, cols)?,
                uncertainty: DMatrix::zeros(rows, cols),
                trace: None,
            })
        }
    }
}
