//! Variational Bayesian approximation for the linear-Gaussian model:
//! natural-gradient updates in Gaussian natural coordinates, the fixed-point
//! mean iteration, and a mean-field (diagonal precision) variant.
//!
//! All expectations are evaluated in closed form for the quadratic
//! (probability-calibrated) objective; non-quadratic objectives are handled
//! by the Laplace module instead.

use nalgebra::{DMatrix, DVector};
use std::io::Write;

use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianMeanCov, GaussianNat};
use crate::model::LinearGaussianModel;
use crate::util;

#[derive(Debug, Clone)]
pub struct VbaConfig {
    /// Natural-gradient step size in (0, 1].
    pub rho: f64,
    pub max_iters: usize,
    /// Absolute ELBO-change stopping threshold.
    pub elbo_tol: f64,
    /// Damping in (0, 1] for the fixed-point mean iteration.
    pub damping: f64,
    /// Gradient-norm part of the stopping rule.
    pub grad_tol: f64,
}

impl Default for VbaConfig {
    fn default() -> Self {
        Self { rho: 0.5, max_iters: 10_000, elbo_tol: 1e-10, damping: 0.5, grad_tol: 1e-8 }
    }
}

impl VbaConfig {
    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::invalid_param("rho", "must lie in (0, 1]"));
        }
        if self.elbo_tol <= 0.0 {
            return Err(Error::invalid_param("elbo_tol", "must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid_param("damping", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// One row of a VBA run record.
#[derive(Debug, Clone)]
pub struct VbaIteration {
    pub iteration: usize,
    pub elbo: f64,
    pub mean_norm: f64,
    pub precision_condition: f64,
}

#[derive(Debug, Clone, Default)]
pub struct VbaTrace {
    pub records: Vec<VbaIteration>,
    /// True when the run stopped by tolerance rather than by exhausting
    /// `max_iters`.
    pub converged: bool,
}

impl VbaTrace {
    pub fn elbo_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.elbo).collect()
    }

    /// CSV export: `iteration,elbo,mean_norm,precision_condition`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,elbo,mean_norm,precision_condition")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.iteration, r.elbo, r.mean_norm, r.precision_condition)?;
        }
        Ok(())
    }
}

/// Gradient of an objective in expectation coordinates: a vector part
/// (w.r.t. `mu1`) and a matrix part (w.r.t. `mu2`).
#[derive(Debug, Clone)]
pub struct MomentGradient {
    pub vec: DVector<f64>,
    pub mat: DMatrix<f64>,
}

/// Full ELBO-objective gradient `grad_mu (E_q[L] - H(q))` for the calibrated
/// quadratic of the linear-Gaussian model. The `E_q[L]` part is constant in
/// `mu` (L is quadratic); the entropy part contributes `+lambda`.
pub fn elbo_moment_gradient(
    q: &GaussianMeanCov,
    model: &LinearGaussianModel,
    g: &DVector<f64>,
) -> Result<MomentGradient> {
    util::check_dim(model.input_dim(), q.dim())?;
    util::check_dim(model.output_dim(), g.len())?;
    let se2 = model.sigma_eps2();
    // E_q[L] = a^T mu1 + <B, mu2> + const with
    //   a = -H^T g / sigma_eps2,  B = (H^T H + lambda I) / (2 sigma_eps2)
    let a = model.operator().apply_adjoint(g)? / (-se2);
    let b = model.regularized_gram()? / (2.0 * se2);
    let nat = gaussian::nat_from_meancov(q);
    Ok(MomentGradient { vec: a + nat.lambda1(), mat: b + nat.lambda2() })
}

/// Natural-gradient update `lambda' = lambda - rho * grad`, where `grad` is
/// the full moment-coordinate gradient of `E_q[L] - H(q)`.
pub fn natural_gradient_step(n: &GaussianNat, grad: &MomentGradient, rho: f64) -> Result<GaussianNat> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid_param("rho", "must lie in (0, 1]"));
    }
    util::check_dim(n.dim(), grad.vec.len())?;
    util::check_dim(n.dim(), grad.mat.nrows())?;
    let lambda1 = n.lambda1() - &grad.vec * rho;
    let lambda2 = util::symmetrize(&(n.lambda2() - &grad.mat * rho));
    GaussianNat::new(lambda1, lambda2)
        .map_err(|_| Error::StepFailure("updated lambda2 is not negative definite".into()))
}

/// One natural-gradient step on the linear-Gaussian model, in mean/precision
/// coordinates:
/// `S' = (1 - rho) S + rho H_m` followed by `m' = m - rho S'^-1 grad L(m)`,
/// with `L` the calibrated negative log posterior and `H_m` its Hessian.
/// The precision is re-symmetrized and safeguarded with escalating jitter.
pub fn gaussian_vba_step(
    q: &GaussianMeanCov,
    model: &LinearGaussianModel,
    g: &DVector<f64>,
    rho: f64,
) -> Result<GaussianMeanCov> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid_param("rho", "must lie in (0, 1]"));
    }
    util::check_dim(model.input_dim(), q.dim())?;
    util::check_dim(model.output_dim(), g.len())?;

    let hess = model.posterior_precision()?;
    let grad = model.grad_neg_log_posterior(g, q.mean())? / (2.0 * model.sigma_eps2());

    let mut s_next = util::symmetrize(&(q.precision() * (1.0 - rho) + &hess * rho));
    // jitter escalation: 1e-10 tr(S)/d scaled by 10 each retry, 3 retries
    let d = s_next.nrows();
    let base_jitter = 1e-10 * s_next.trace() / d as f64;
    let mut chol = util::cholesky(&s_next);
    let mut escalation = 0;
    while chol.is_err() && escalation < 3 {
        let jitter = base_jitter * 10f64.powi(escalation);
        for i in 0..d {
            s_next[(i, i)] += jitter;
        }
        chol = util::cholesky(&s_next);
        escalation += 1;
    }
    let chol = chol.map_err(|_| {
        Error::StepFailure("precision update lost positive definiteness after jitter cap".into())
    })?;

    let mean = q.mean() - chol.solve(&grad) * rho;
    GaussianMeanCov::new(mean, s_next)
}

fn condition_estimate(precision: &DMatrix<f64>) -> f64 {
    if precision.nrows() <= 64 {
        let eigs = precision.symmetric_eigenvalues();
        let max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    } else {
        // cheap Cholesky-diagonal proxy for large problems (diagnostic only)
        match util::cholesky(precision) {
            Ok(c) => {
                let diag = c.l_dirty().diagonal();
                let max = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
                (max / min).powi(2)
            }
            Err(_) => f64::INFINITY,
        }
    }
}

fn calibrated_grad_norm(model: &LinearGaussianModel, g: &DVector<f64>, m: &DVector<f64>) -> Result<f64> {
    Ok((model.grad_neg_log_posterior(g, m)? / (2.0 * model.sigma_eps2())).norm())
}

fn run_vba_loop(
    model: &LinearGaussianModel,
    g: &DVector<f64>,
    init: GaussianMeanCov,
    cfg: &VbaConfig,
    mean_field: bool,
) -> Result<(GaussianMeanCov, VbaTrace)> {
    cfg.validate()?;
    util::check_dim(model.input_dim(), init.dim())?;

    let mut q = init;
    let mut trace = VbaTrace::default();
    let mut last_elbo = gaussian::elbo(&q, model, g)?;
    trace.records.push(VbaIteration {
        iteration: 0,
        elbo: last_elbo,
        mean_norm: q.mean().norm(),
        precision_condition: condition_estimate(q.precision()),
    });

    for iter in 1..=cfg.max_iters {
        // step, with rho backoff on step failure (up to 10 halvings)
        let mut rho = cfg.rho;
        let mut next = None;
        for _ in 0..=10 {
            match step_once(&q, model, g, rho, mean_field) {
                Ok(n) => {
                    next = Some(n);
                    break;
                }
                Err(Error::StepFailure(_)) => rho *= 0.5,
                Err(e) => return Err(e),
            }
        }
        q = next.ok_or_else(|| Error::StepFailure("rho backoff exhausted".into()))?;

        let elbo = gaussian::elbo(&q, model, g)?;
        trace.records.push(VbaIteration {
            iteration: iter,
            elbo,
            mean_norm: q.mean().norm(),
            precision_condition: condition_estimate(q.precision()),
        });
        let grad_norm = calibrated_grad_norm(model, g, q.mean())?;
        if (elbo - last_elbo).abs() < cfg.elbo_tol && grad_norm < cfg.grad_tol {
            trace.converged = true;
            return Ok((q, trace));
        }
        last_elbo = elbo;
    }
    Ok((q, trace))
}

fn step_once(
    q: &GaussianMeanCov,
    model: &LinearGaussianModel,
    g: &DVector<f64>,
    rho: f64,
    mean_field: bool,
) -> Result<GaussianMeanCov> {
    if !mean_field {
        return gaussian_vba_step(q, model, g, rho);
    }
    // mean-field: same update with the precision constrained to its diagonal
    let hess = model.posterior_precision()?;
    let grad = model.grad_neg_log_posterior(g, q.mean())? / (2.0 * model.sigma_eps2());
    let s_full = q.precision() * (1.0 - rho) + &hess * rho;
    let s_next = DMatrix::from_diagonal(&s_full.diagonal());
    let chol = util::cholesky(&s_next)
        .map_err(|_| Error::StepFailure("diagonal precision update not positive definite".into()))?;
    let mean = q.mean() - chol.solve(&grad) * rho;
    GaussianMeanCov::new(mean, s_next)
}

/// Iterates [`gaussian_vba_step`] from `init` until the ELBO change drops
/// below `elbo_tol` (with a small gradient norm) or `max_iters`. On the
/// conjugate linear-Gaussian model the result matches the closed-form
/// posterior.
pub fn run_vba(
    model: &LinearGaussianModel,
    g: &DVector<f64>,
    init: GaussianMeanCov,
    cfg: &VbaConfig,
) -> Result<(GaussianMeanCov, VbaTrace)> {
    run_vba_loop(model, g, init, cfg, false)
}

/// Mean-field VBA from the prior: the precision is constrained to be
/// diagonal. Converges to the exact mean, with under-estimated marginal
/// variances whenever the posterior is correlated.
pub fn mean_field_vba(
    model: &LinearGaussianModel,
    g: &DVector<f64>,
    cfg: &VbaConfig,
) -> Result<(GaussianMeanCov, VbaTrace)> {
    let n = model.input_dim();
    let prior = GaussianMeanCov::new(
        DVector::zeros(n),
        DMatrix::identity(n, n) / model.sigma_f2(),
    )?;
    run_vba_loop(model, g, prior, cfg, true)
}

/// Fixed-point mean iteration `m <- (1 - damping) m + damping M(m)` with
/// `M(m) = dE/dm + m` and `dE/dm = -grad L(m)` (calibrated). At the fixed
/// point the ELBO is stationary in the mean and `m` equals the posterior
/// mean on conjugate models.
pub fn fixed_point_mean(
    model: &LinearGaussianModel,
    g: &DVector<f64>,
    init_mean: &DVector<f64>,
    cfg: &VbaConfig,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    util::check_dim(model.input_dim(), init_mean.len())?;
    let cap = 1e8 * (1.0 + init_mean.norm());
    let mut m = init_mean.clone();
    for _ in 0..cfg.max_iters {
        let grad = model.grad_neg_log_posterior(g, &m)? / (2.0 * model.sigma_eps2());
        if grad.norm() < cfg.grad_tol {
            return Ok(m);
        }
        m -= grad * cfg.damping;
        if m.norm() > cap {
            return Err(Error::Divergence("fixed-point mean iteration exceeded the norm cap".into()));
        }
    }
    Ok(m)
}
