//! Multivariate Gaussians in three coordinate systems linked by Legendre
//! duality: mean/precision `(m, S)`, natural `(lambda1, lambda2) = (S m, -S/2)`,
//! and expectation `(mu1, mu2) = (E[x], E[x x^T])`.
//!
//! The sufficient statistics are fixed to `t(x) = (x, x x^T)`; only the
//! Gaussian family is supported.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::LinearGaussianModel;
use crate::util;

/// Relative tolerance for the symmetry invariant of stored matrices.
const SYMMETRY_TOL: f64 = 1e-12;

/// Gaussian `N(m, S^-1)` parameterized by mean `m` and precision `S`.
#[derive(Debug, Clone)]
pub struct GaussianMeanCov {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

/// Natural parameters `(S m, -S/2)` of the same Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianNat {
    lambda1: DVector<f64>,
    lambda2: DMatrix<f64>,
}

/// Expectation parameters `(E[x], E[x x^T])`.
#[derive(Debug, Clone)]
pub struct GaussianMoments {
    mu1: DVector<f64>,
    mu2: DMatrix<f64>,
}

impl GaussianMeanCov {
    /// Validates symmetry and positive definiteness of the precision.
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        if precision.nrows() != mean.len() || !precision.is_square() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: precision.nrows(),
            });
        }
        if !util::is_symmetric(&precision, SYMMETRY_TOL) {
            return Err(Error::InvalidDistribution(
                "precision matrix is not symmetric".into(),
            ));
        }
        let precision = util::symmetrize(&precision);
        util::cholesky(&precision)?;
        Ok(Self { mean, precision })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            precision: DMatrix::identity(dim, dim),
        }
    }

    /// 1-D Gaussian from mean and variance.
    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        if variance <= 0.0 {
            return Err(Error::invalid_param("variance", "must be positive"));
        }
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, 1.0 / variance))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        // new() guarantees the factorization exists
        let chol = util::cholesky(&self.precision).expect("validated precision");
        util::symmetrize(&chol.inverse())
    }

    pub fn ln_det_precision(&self) -> f64 {
        let chol = util::cholesky(&self.precision).expect("validated precision");
        util::ln_det_spd(&chol)
    }
}

impl GaussianNat {
    /// `lambda2` must be symmetric negative definite; it is re-symmetrized
    /// on construction.
    pub fn new(lambda1: DVector<f64>, lambda2: DMatrix<f64>) -> Result<Self> {
        if lambda2.nrows() != lambda1.len() || !lambda2.is_square() {
            return Err(Error::DimensionMismatch {
                expected: lambda1.len(),
                got: lambda2.nrows(),
            });
        }
        let lambda2 = util::symmetrize(&lambda2);
        util::cholesky(&(-&lambda2 * 2.0))
            .map_err(|_| Error::InvalidDistribution("lambda2 is not negative definite".into()))?;
        Ok(Self { lambda1, lambda2 })
    }

    pub fn dim(&self) -> usize {
        self.lambda1.len()
    }

    pub fn lambda1(&self) -> &DVector<f64> {
        &self.lambda1
    }

    pub fn lambda2(&self) -> &DMatrix<f64> {
        &self.lambda2
    }
}

impl GaussianMoments {
    /// Requires `mu2 - mu1 mu1^T` (the covariance) to be positive definite.
    pub fn new(mu1: DVector<f64>, mu2: DMatrix<f64>) -> Result<Self> {
        if mu2.nrows() != mu1.len() || !mu2.is_square() {
            return Err(Error::DimensionMismatch {
                expected: mu1.len(),
                got: mu2.nrows(),
            });
        }
        let mu2 = util::symmetrize(&mu2);
        let cov = &mu2 - &mu1 * mu1.transpose();
        util::cholesky(&util::symmetrize(&cov))
            .map_err(|_| Error::InvalidDistribution("mu2 - mu1 mu1^T is not positive definite".into()))?;
        Ok(Self { mu1, mu2 })
    }

    pub fn dim(&self) -> usize {
        self.mu1.len()
    }

    pub fn mu1(&self) -> &DVector<f64> {
        &self.mu1
    }

    pub fn mu2(&self) -> &DMatrix<f64> {
        &self.mu2
    }
}

/// `(S m, -S/2)`.
pub fn nat_from_meancov(g: &GaussianMeanCov) -> GaussianNat {
    GaussianNat {
        lambda1: g.precision() * g.mean(),
        lambda2: g.precision() * -0.5,
    }
}

/// Inverse map: `S = -2 lambda2`, `m = S^-1 lambda1`.
pub fn meancov_from_nat(n: &GaussianNat) -> Result<GaussianMeanCov> {
    let precision = util::symmetrize(&(-&n.lambda2 * 2.0));
    let chol = util::cholesky(&precision)?;
    let mean = chol.solve(&n.lambda1);
    Ok(GaussianMeanCov { mean, precision })
}

/// Expectation parameters via the Legendre map `mu = grad F(lambda)`:
/// `mu1 = m`, `mu2 = S^-1 + m m^T`.
pub fn moments_from_nat(n: &GaussianNat) -> Result<GaussianMoments> {
    let g = meancov_from_nat(n)?;
    let mu2 = g.covariance() + g.mean() * g.mean().transpose();
    Ok(GaussianMoments {
        mu1: g.mean().clone(),
        mu2: util::symmetrize(&mu2),
    })
}

/// Inverse Legendre map `lambda = grad F*(mu)`.
pub fn nat_from_moments(mo: &GaussianMoments) -> Result<GaussianNat> {
    let cov = util::symmetrize(&(&mo.mu2 - &mo.mu1 * mo.mu1.transpose()));
    let chol = util::cholesky(&cov)
        .map_err(|_| Error::InvalidDistribution("degenerate covariance in moments".into()))?;
    let precision = util::symmetrize(&chol.inverse());
    Ok(GaussianNat {
        lambda1: &precision * &mo.mu1,
        lambda2: precision * -0.5,
    })
}

/// Log partition `F(lambda) = m^T S m / 2 - ln det S / 2 + d ln(2 pi) / 2`,
/// normalizing `exp(lambda^T t(x) - F(lambda))`.
pub fn log_partition(n: &GaussianNat) -> Result<f64> {
    let g = meancov_from_nat(n)?;
    let quad = (g.precision() * g.mean()).dot(g.mean());
    Ok(0.5 * quad - 0.5 * g.ln_det_precision() + 0.5 * g.dim() as f64 * (2.0 * PI).ln())
}

/// Differential entropy `H = ln det(2 pi e S^-1) / 2`.
pub fn entropy(g: &GaussianMeanCov) -> f64 {
    let d = g.dim() as f64;
    0.5 * d * (1.0 + (2.0 * PI).ln()) - 0.5 * g.ln_det_precision()
}

/// Closed-form `KL(q || p)` between two Gaussians of equal dimension.
pub fn kl_gaussian(q: &GaussianMeanCov, p: &GaussianMeanCov) -> Result<f64> {
    util::check_dim(q.dim(), p.dim())?;
    let d = q.dim() as f64;
    let sigma_q = q.covariance();
    let delta = p.mean() - q.mean();
    let trace = (p.precision() * &sigma_q).trace();
    let quad = (p.precision() * &delta).dot(&delta);
    Ok(0.5 * (trace + quad - d + q.ln_det_precision() - p.ln_det_precision()))
}

/// ELBO `E_q[log p(g, f)] + H(q)` for the linear-Gaussian model, in closed
/// form. Never exceeds the analytic log evidence; equals it when `q` is the
/// exact posterior.
pub fn elbo(q: &GaussianMeanCov, model: &LinearGaussianModel, g_obs: &DVector<f64>) -> Result<f64> {
    util::check_dim(model.input_dim(), q.dim())?;
    util::check_dim(model.output_dim(), g_obs.len())?;
    let m = q.mean();
    let sigma = q.covariance();

    let hth = model.gram_matrix()?;
    let residual = g_obs - model.operator().apply(m)?;
    let tr_hth_sigma: f64 = hth.zip_fold(&sigma, 0.0, |acc, a, b| acc + a * b);

    let se2 = model.sigma_eps2();
    let sf2 = model.sigma_f2();
    let m_dim = model.output_dim() as f64;
    let n_dim = model.input_dim() as f64;

    let data_term = -0.5 * m_dim * (2.0 * PI * se2).ln()
        - (residual.norm_squared() + tr_hth_sigma) / (2.0 * se2);
    let prior_term = -0.5 * n_dim * (2.0 * PI * sf2).ln()
        - (m.norm_squared() + sigma.trace()) / (2.0 * sf2);

    Ok(data_term + prior_term + entropy(q))
}
