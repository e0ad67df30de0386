//! The linear-Gaussian inverse model `g = H f + eps` with
//! `eps ~ N(0, sigma_eps2 I)` and prior `f ~ N(0, sigma_f2 I)`, its
//! closed-form Gaussian posterior, the three equivalent reconstruction
//! factorizations, and the analytic evidence.
//!
//! The quadratic objective `L(f) = ||g - H f||^2 + lambda_reg ||f||^2`
//! carries no 1/2 factors and no noise scaling; probability-calibrated
//! quantities (posterior covariance, evidence, the Laplace/VBA objective)
//! apply the `1/(2 sigma_eps2)` rescaling explicitly.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::laplace::Objective;
use crate::operator::LinearOperator;
use crate::util;

#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    operator: LinearOperator,
    sigma_eps2: f64,
    sigma_f2: f64,
}

/// Exact Gaussian posterior `N(mean, covariance)`.
#[derive(Debug, Clone)]
pub struct PosteriorGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(operator: LinearOperator, sigma_eps2: f64, sigma_f2: f64) -> Result<Self> {
        if sigma_eps2 <= 0.0 {
            return Err(Error::invalid_param("sigma_eps2", "must be positive"));
        }
        if sigma_f2 <= 0.0 {
            return Err(Error::invalid_param("sigma_f2", "must be positive"));
        }
        Ok(Self { operator, sigma_eps2, sigma_f2 })
    }

    pub fn operator(&self) -> &LinearOperator {
        &self.operator
    }

    pub fn sigma_eps2(&self) -> f64 {
        self.sigma_eps2
    }

    pub fn sigma_f2(&self) -> f64 {
        self.sigma_f2
    }

    /// Ridge ratio `sigma_eps2 / sigma_f2`; always recomputed.
    pub fn lambda_reg(&self) -> f64 {
        self.sigma_eps2 / self.sigma_f2
    }

    pub fn input_dim(&self) -> usize {
        self.operator.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.operator.output_dim()
    }

    /// Dense `H^T H` (capacity-capped).
    pub fn gram_matrix(&self) -> Result<DMatrix<f64>> {
        self.operator.gram_matrix()
    }

    /// Dense `H^T H + lambda_reg I`.
    pub fn regularized_gram(&self) -> Result<DMatrix<f64>> {
        let mut b = self.gram_matrix()?;
        let lam = self.lambda_reg();
        for i in 0..b.nrows() {
            b[(i, i)] += lam;
        }
        Ok(b)
    }

    /// Posterior precision of the calibrated model:
    /// `(H^T H + lambda_reg I) / sigma_eps2`.
    pub fn posterior_precision(&self) -> Result<DMatrix<f64>> {
        Ok(self.regularized_gram()? / self.sigma_eps2)
    }

    /// Closed-form posterior: mean `(H^T H + lambda I)^-1 H^T g`,
    /// covariance `sigma_eps2 (H^T H + lambda I)^-1`.
    pub fn posterior_closed_form(&self, g: &DVector<f64>) -> Result<PosteriorGaussian> {
        util::check_dim(self.output_dim(), g.len())?;
        let b = self.regularized_gram()?;
        let chol = util::cholesky(&b)?;
        let htg = self.operator.apply_adjoint(g)?;
        let mean = chol.solve(&htg);
        let covariance = util::symmetrize(&(chol.inverse() * self.sigma_eps2));
        Ok(PosteriorGaussian { mean, covariance })
    }

    /// `f = A g` with `A = (H^T H + lambda I)^-1 H^T`.
    pub fn reconstruct_a(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        util::check_dim(self.output_dim(), g.len())?;
        let h = self.operator.to_dense()?;
        let b = self.regularized_gram()?;
        let a = util::cholesky(&b)?.inverse() * h.transpose();
        Ok(a * g)
    }

    /// `f = B (H^T g)` with `B = (H^T H + lambda I)^-1`.
    pub fn reconstruct_b(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        util::check_dim(self.output_dim(), g.len())?;
        let htg = self.operator.apply_adjoint(g)?;
        let b = self.regularized_gram()?;
        Ok(util::cholesky(&b)?.solve(&htg))
    }

    /// `f = (1/lambda) H^T (C g)` with `C = ((1/lambda) H H^T + I)^-1`.
    /// Equivalent to the A and B paths by the push-through identity
    /// `(H^T H + lambda I)^-1 H^T = H^T (H H^T + lambda I)^-1`.
    pub fn reconstruct_c(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        util::check_dim(self.output_dim(), g.len())?;
        let lambda = self.lambda_reg();
        let mut c = self.operator.outer_gram_matrix()? / lambda;
        for i in 0..c.nrows() {
            c[(i, i)] += 1.0;
        }
        let cg = util::cholesky(&c)?.solve(g) / lambda;
        self.operator.apply_adjoint(&cg)
    }

    /// `L(f) = ||g - H f||^2 + lambda_reg ||f||^2` (paper weighting).
    pub fn neg_log_posterior(&self, g: &DVector<f64>, f: &DVector<f64>) -> Result<f64> {
        util::check_dim(self.output_dim(), g.len())?;
        util::check_dim(self.input_dim(), f.len())?;
        let residual = g - self.operator.apply(f)?;
        Ok(residual.norm_squared() + self.lambda_reg() * f.norm_squared())
    }

    /// `grad L = 2 (H^T H f - H^T g + lambda_reg f)`.
    pub fn grad_neg_log_posterior(&self, g: &DVector<f64>, f: &DVector<f64>) -> Result<DVector<f64>> {
        util::check_dim(self.output_dim(), g.len())?;
        util::check_dim(self.input_dim(), f.len())?;
        let hthf = self.operator.apply_adjoint(&self.operator.apply(f)?)?;
        let htg = self.operator.apply_adjoint(g)?;
        Ok((hthf - htg + f * self.lambda_reg()) * 2.0)
    }

    /// `hess L = 2 (H^T H + lambda_reg I)`, constant in `f`.
    pub fn hessian_neg_log_posterior(&self) -> Result<DMatrix<f64>> {
        Ok(self.regularized_gram()? * 2.0)
    }

    /// `log N(g | 0, sigma_f2 H H^T + sigma_eps2 I)`, via Cholesky.
    /// Analytic oracle for Laplace evidence and the ELBO upper bound.
    pub fn log_evidence_analytic(&self, g: &DVector<f64>) -> Result<f64> {
        util::check_dim(self.output_dim(), g.len())?;
        let mut c = self.operator.outer_gram_matrix()? * self.sigma_f2;
        for i in 0..c.nrows() {
            c[(i, i)] += self.sigma_eps2;
        }
        let chol = util::cholesky(&c)
            .map_err(|_| Error::InvalidModel("degenerate marginal covariance".into()))?;
        let m = self.output_dim() as f64;
        Ok(-0.5 * chol.solve(g).dot(g) - 0.5 * util::ln_det_spd(&chol) - 0.5 * m * (2.0 * PI).ln())
    }

    /// The full negative log joint
    /// `-log p(g | f) - log p(f)` with all normalization constants, i.e. the
    /// probability-calibrated objective whose Laplace approximation is exact
    /// on this model.
    pub fn neg_log_joint(&self, g: DVector<f64>) -> Result<NegLogJoint> {
        util::check_dim(self.output_dim(), g.len())?;
        Ok(NegLogJoint { model: self.clone(), g })
    }
}

/// Calibrated negative log joint of a [`LinearGaussianModel`]; implements
/// [`Objective`] for MAP search and Laplace approximation.
#[derive(Debug, Clone)]
pub struct NegLogJoint {
    model: LinearGaussianModel,
    g: DVector<f64>,
}

impl NegLogJoint {
    /// Constant offset relating the calibrated value to the paper-weighted
    /// quadratic: `value(f) = L(f) / (2 sigma_eps2) + constant()`.
    pub fn constant(&self) -> f64 {
        let m = self.model.output_dim() as f64;
        let n = self.model.input_dim() as f64;
        0.5 * m * (2.0 * PI * self.model.sigma_eps2()).ln()
            + 0.5 * n * (2.0 * PI * self.model.sigma_f2()).ln()
    }

    /// Analytic Hessian `(H^T H + lambda_reg I) / sigma_eps2`.
    pub fn hessian(&self) -> Result<DMatrix<f64>> {
        self.model.posterior_precision()
    }
}

impl Objective for NegLogJoint {
    fn value(&self, f: &DVector<f64>) -> f64 {
        let l = self
            .model
            .neg_log_posterior(&self.g, f)
            .expect("dimension validated at construction");
        l / (2.0 * self.model.sigma_eps2()) + self.constant()
    }

    fn gradient(&self, f: &DVector<f64>) -> DVector<f64> {
        self.model
            .grad_neg_log_posterior(&self.g, f)
            .expect("dimension validated at construction")
            / (2.0 * self.model.sigma_eps2())
    }
}
