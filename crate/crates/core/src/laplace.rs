//! MAP estimation by gradient descent, Gaussian (Laplace) approximation of
//! the posterior from the curvature at the mode, and the resulting evidence
//! approximation. Exact on linear-Gaussian models.
//!
//! All objectives here are *negative* log posteriors (or negative log
//! joints): minimization problems. With `Sigma = hessian^-1` at the MAP, the
//! evidence estimate is
//! `log Z = (d/2) ln 2pi - (1/2) ln det(hessian) - objective(map)`.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::util;

/// A twice-differentiable scalar objective. Implementations must be
/// re-entrant: finite-difference routines may evaluate them concurrently.
pub trait Objective {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Objective from a pair of closures.
pub struct FnObjective<V, G>
where
    V: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    pub value_fn: V,
    pub grad_fn: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value_fn)(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad_fn)(x)
    }
}

#[derive(Debug, Clone)]
pub struct DescentConfig {
    /// Initial step size; halved by backtracking on objective increase.
    pub step: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Consecutive iterations without descent progress tolerated before a
    /// divergence error.
    pub patience: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self { step: 1e-2, max_iters: 50_000, grad_tol: 1e-8, patience: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub theta_map: DVector<f64>,
    pub objective_at_map: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// False when the iteration budget ran out before `grad_tol` was met.
    pub converged: bool,
}

/// Gaussian approximation around a mode, with Laplace evidence.
#[derive(Debug, Clone)]
pub struct LaplacePosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub log_evidence: f64,
}

/// Hessian supply for [`laplace_approximate`]: analytic or by central
/// finite differences of the gradient-free objective.
pub enum HessianSource<'a> {
    Analytic(&'a DMatrix<f64>),
    FiniteDifference { step: f64 },
}

/// Fixed-step gradient descent with backtracking halving.
pub fn find_map(objective: &dyn Objective, init: &DVector<f64>, cfg: &DescentConfig) -> Result<MapResult> {
    if cfg.step <= 0.0 {
        return Err(Error::invalid_param("step", "must be positive"));
    }
    let mut x = init.clone();
    let mut value = util::check_finite("objective", objective.value(&x))?;
    let mut grad = objective.gradient(&x);
    util::check_finite_vec("gradient", &grad)?;
    let mut stalls = 0usize;

    for iter in 0..cfg.max_iters {
        let grad_norm = grad.norm();
        if grad_norm <= cfg.grad_tol {
            return Ok(MapResult {
                theta_map: x,
                objective_at_map: value,
                iterations: iter,
                grad_norm,
                converged: true,
            });
        }

        // backtracking: halve the step until the objective decreases
        let mut step = cfg.step;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &x - &grad * step;
            let cand_value = objective.value(&candidate);
            if !cand_value.is_finite() {
                step *= 0.5;
                continue;
            }
            if cand_value <= value {
                x = candidate;
                value = cand_value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if accepted {
            stalls = 0;
        } else {
            stalls += 1;
            if stalls >= cfg.patience {
                return Err(Error::Divergence(
                    "objective failed to decrease over the patience window".into(),
                ));
            }
        }
        grad = objective.gradient(&x);
        util::check_finite_vec("gradient", &grad)?;
    }

    let grad_norm = grad.norm();
    Ok(MapResult {
        theta_map: x,
        objective_at_map: value,
        iterations: cfg.max_iters,
        grad_norm,
        converged: grad_norm <= cfg.grad_tol,
    })
}

/// Gaussian fit at a stationary point: mean = `theta_map`, covariance =
/// inverse Hessian of the negative log posterior, evidence from the
/// second-order expansion.
pub fn laplace_approximate(
    objective: &dyn Objective,
    theta_map: &DVector<f64>,
    hessian: HessianSource,
) -> Result<LaplacePosterior> {
    let h = match hessian {
        HessianSource::Analytic(h) => {
            util::check_dim(theta_map.len(), h.nrows())?;
            h.clone()
        }
        HessianSource::FiniteDifference { step } => hessian_fd(objective, theta_map, step)?,
    };
    laplace_from_hessian(objective, theta_map, util::symmetrize(&h))
}

/// Diagonal-Hessian variant: keeps only the diagonal of the curvature.
/// The one scalable shortcut offered by this crate.
pub fn laplace_approximate_diagonal(
    objective: &dyn Objective,
    theta_map: &DVector<f64>,
    hessian: HessianSource,
) -> Result<LaplacePosterior> {
    let full = match hessian {
        HessianSource::Analytic(h) => {
            util::check_dim(theta_map.len(), h.nrows())?;
            h.clone()
        }
        HessianSource::FiniteDifference { step } => hessian_fd(objective, theta_map, step)?,
    };
    let diag = DMatrix::from_diagonal(&full.diagonal());
    laplace_from_hessian(objective, theta_map, diag)
}

fn laplace_from_hessian(
    objective: &dyn Objective,
    theta_map: &DVector<f64>,
    hessian: DMatrix<f64>,
) -> Result<LaplacePosterior> {
    let d = theta_map.len() as f64;
    let chol = match util::cholesky(&hessian) {
        Ok(c) => c,
        Err(_) => {
            // distinguish indefinite from singular via the eigenvalues
            let eigs = hessian.symmetric_eigenvalues();
            let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < -1e-12 * util::max_abs(&hessian).max(1.0) {
                return Err(Error::SaddlePoint);
            }
            return Err(Error::Degenerate);
        }
    };
    let ln_det = util::ln_det_spd(&chol);
    let covariance = util::symmetrize(&chol.inverse());
    let log_evidence = 0.5 * d * (2.0 * PI).ln() - 0.5 * ln_det - objective.value(theta_map);
    Ok(LaplacePosterior {
        mean: theta_map.clone(),
        covariance,
        log_evidence: util::check_finite("log_evidence", log_evidence)?,
    })
}

/// Symmetric central-difference Hessian. The per-coordinate step is
/// `step * max(1, |theta_i|)`.
pub fn hessian_fd(objective: &dyn Objective, theta: &DVector<f64>, step: f64) -> Result<DMatrix<f64>> {
    if step <= 0.0 {
        return Err(Error::invalid_param("step", "must be positive"));
    }
    let d = theta.len();
    let hs: Vec<f64> = (0..d).map(|i| step * theta[i].abs().max(1.0)).collect();
    let mut out = DMatrix::zeros(d, d);
    let f0 = util::check_finite("objective", objective.value(theta))?;
    for i in 0..d {
        // diagonal: (f(x+h) - 2 f(x) + f(x-h)) / h^2
        let mut xp = theta.clone();
        let mut xm = theta.clone();
        xp[i] += hs[i];
        xm[i] -= hs[i];
        let fp = util::check_finite("objective", objective.value(&xp))?;
        let fm = util::check_finite("objective", objective.value(&xm))?;
        out[(i, i)] = (fp - 2.0 * f0 + fm) / (hs[i] * hs[i]);
        for j in (i + 1)..d {
            let mut xpp = theta.clone();
            let mut xpm = theta.clone();
            let mut xmp = theta.clone();
            let mut xmm = theta.clone();
            xpp[i] += hs[i];
            xpp[j] += hs[j];
            xpm[i] += hs[i];
            xpm[j] -= hs[j];
            xmp[i] -= hs[i];
            xmp[j] += hs[j];
            xmm[i] -= hs[i];
            xmm[j] -= hs[j];
            let v = (objective.value(&xpp) - objective.value(&xpm) - objective.value(&xmp)
                + objective.value(&xmm))
                / (4.0 * hs[i] * hs[j]);
            out[(i, j)] = util::check_finite("hessian entry", v)?;
            out[(j, i)] = out[(i, j)];
        }
    }
    Ok(out)
}
