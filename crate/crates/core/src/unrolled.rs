//! The unrolled shrinkage network: K layers of
//! `z <- soft_threshold(W z + W0 g, t)`, analytic ISTA weight construction
//! (`W0 = alpha H^T`, `W = I - alpha H^T H`), a reference ISTA iterator as
//! an independent oracle, and full-batch gradient-descent training with
//! backtracking.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::operator::LinearOperator;

/// Componentwise `sign(x) * max(|x| - t, 0)`.
pub fn soft_threshold(x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if t < 0.0 {
        return Err(Error::invalid_param("t", "threshold must be non-negative"));
    }
    Ok(x.map(|v| soft_threshold_scalar(v, t)))
}

#[inline]
pub fn soft_threshold_scalar(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Sub-gradient of the soft threshold: 0 inside the dead zone and at the
/// kink, 1 outside.
#[inline]
fn soft_threshold_subgrad(pre: f64, t: f64) -> f64 {
    if pre.abs() > t {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct UnrolledNet {
    k: usize,
    /// Injection matrix, `N x M`.
    w0: DMatrix<f64>,
    /// One shared matrix when tied, K matrices otherwise.
    weights: Vec<DMatrix<f64>>,
    threshold: f64,
    tied: bool,
}

/// Construction status of [`build_ista_net`]: the estimated spectral bound
/// and whether the requested step satisfies it.
#[derive(Debug, Clone)]
pub struct IstaBuildStatus {
    pub spectral_norm_sq: f64,
    pub alpha_within_bound: bool,
}

impl UnrolledNet {
    pub fn new(w0: DMatrix<f64>, weights: Vec<DMatrix<f64>>, threshold: f64, tied: bool) -> Result<Self> {
        if threshold < 0.0 {
            return Err(Error::invalid_param("threshold", "must be non-negative"));
        }
        if weights.is_empty() {
            return Err(Error::invalid_param("weights", "need at least one layer"));
        }
        let n = w0.nrows();
        let k = if tied {
            if weights.len() != 1 {
                return Err(Error::invalid_param("weights", "tied nets store exactly one matrix"));
            }
            // tied nets carry their depth separately; see `with_depth`
            1
        } else {
            weights.len()
        };
        for w in &weights {
            if w.nrows() != n || w.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, got: w.nrows() });
            }
        }
        Ok(Self { k, w0, weights, threshold, tied })
    }

    /// Sets the depth of a tied net (untied nets get it from the weight list).
    pub fn with_depth(mut self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid_param("k", "layer count must be positive"));
        }
        if !self.tied && k != self.weights.len() {
            return Err(Error::invalid_param("k", "untied depth is fixed by the weight list"));
        }
        self.k = k;
        Ok(self)
    }

    pub fn depth(&self) -> usize {
        self.k
    }

    pub fn input_dim(&self) -> usize {
        self.w0.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.w0.nrows()
    }

    pub fn w0(&self) -> &DMatrix<f64> {
        &self.w0
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    /// Weight matrix of layer `k` (0-based); the shared matrix when tied.
    pub fn layer_weight(&self, k: usize) -> &DMatrix<f64> {
        if self.tied {
            &self.weights[0]
        } else {
            &self.weights[k]
        }
    }

    pub fn weight_matrices(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    /// Mutable access for external perturbation (finite-difference probes,
    /// custom optimizers). Shapes must be preserved.
    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn w0_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.w0
    }
}

/// Largest eigenvalue of `H^T H` (squared spectral norm of `H`) by power
/// iteration on the matrix-free operator.
pub fn spectral_norm_sq(op: &LinearOperator, iters: usize, seed: u64) -> Result<f64> {
    let n = op.input_dim();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0f64));
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = op.apply_adjoint(&op.apply(&v)?)?;
        lambda = w.norm();
        if lambda == 0.0 {
            return Ok(0.0);
        }
        v = w / lambda;
    }
    Ok(lambda)
}

/// Analytic ISTA weights: `W0 = alpha H^T`, `W = I - alpha H^T H` for every
/// layer. A step exceeding the spectral bound is reported in the status but
/// does not fail construction.
pub fn build_ista_net(
    op: &LinearOperator,
    alpha: f64,
    threshold: f64,
    k: usize,
    tied: bool,
) -> Result<(UnrolledNet, IstaBuildStatus)> {
    if alpha <= 0.0 {
        return Err(Error::invalid_param("alpha", "must be positive"));
    }
    if k == 0 {
        return Err(Error::invalid_param("k", "layer count must be positive"));
    }
    let spectral = spectral_norm_sq(op, 200, 0x5eed)?;
    let status = IstaBuildStatus {
        spectral_norm_sq: spectral,
        alpha_within_bound: spectral > 0.0 && alpha <= 1.0 / spectral + 1e-12,
    };
    let h = op.to_dense()?;
    let w0 = h.transpose() * alpha;
    let n = op.input_dim();
    let w = DMatrix::identity(n, n) - op.gram_matrix()? * alpha;
    let weights = if tied { vec![w] } else { vec![w; k] };
    let net = UnrolledNet::new(w0, weights, threshold, tied)?.with_depth(k)?;
    Ok((net, status))
}

/// Forward pass; returns the output and all intermediate activations
/// `z0, z1, ..., zK` (needed for training). `z0` defaults to `W0 g`.
pub fn forward(net: &UnrolledNet, g: &DVector<f64>, z0: Option<&DVector<f64>>) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    if g.len() != net.input_dim() {
        return Err(Error::DimensionMismatch { expected: net.input_dim(), got: g.len() });
    }
    let injection = &net.w0 * g;
    let z_init = match z0 {
        Some(z) => {
            if z.len() != net.state_dim() {
                return Err(Error::DimensionMismatch { expected: net.state_dim(), got: z.len() });
            }
            z.clone()
        }
        None => injection.clone(),
    };
    let mut activations = Vec::with_capacity(net.depth() + 1);
    activations.push(z_init);
    for k in 0..net.depth() {
        let pre = net.layer_weight(k) * activations.last().unwrap() + &injection;
        activations.push(soft_threshold(&pre, net.threshold)?);
    }
    Ok((activations.last().unwrap().clone(), activations))
}

/// Classic ISTA iteration `z <- soft_threshold(z - alpha H^T (H z - g), t)`,
/// run K times; the independent oracle for the unrolling equivalence.
/// `z0` defaults to `alpha H^T g` to match [`forward`].
pub fn ista_reference(
    op: &LinearOperator,
    g: &DVector<f64>,
    alpha: f64,
    threshold: f64,
    k: usize,
    z0: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    if g.len() != op.output_dim() {
        return Err(Error::DimensionMismatch { expected: op.output_dim(), got: g.len() });
    }
    let mut z = match z0 {
        Some(z) => z.clone(),
        None => op.apply_adjoint(g)? * alpha,
    };
    for _ in 0..k {
        let residual = op.apply(&z)? - g;
        let step = &z - op.apply_adjoint(&residual)? * alpha;
        z = soft_threshold(&step, threshold)?;
    }
    Ok(z)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Quadratic decay on every distinct weight matrix (Frobenius norm
    /// squared, counting W0 and each stored layer matrix once).
    pub weight_decay: f64,
    /// Learn the shared threshold jointly, with projection to `t >= 0`.
    pub learn_threshold: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-2, epochs: 200, weight_decay: 0.0, learn_threshold: false }
    }
}

/// Mean squared reconstruction error over the dataset plus weight decay.
pub fn loss(net: &UnrolledNet, dataset: &[(DVector<f64>, DVector<f64>)], weight_decay: f64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid_param("dataset", "must be non-empty"));
    }
    let mut total = 0.0;
    for (g, f_true) in dataset {
        let (out, _) = forward(net, g, None)?;
        if out.len() != f_true.len() {
            return Err(Error::DimensionMismatch { expected: out.len(), got: f_true.len() });
        }
        total += (out - f_true).norm_squared();
    }
    let mut decay = net.w0.norm_squared();
    for w in &net.weights {
        decay += w.norm_squared();
    }
    Ok(total / dataset.len() as f64 + weight_decay * decay)
}

/// Gradients of [`loss`] with respect to every learnable parameter.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub w0: DMatrix<f64>,
    /// One matrix per stored weight (a single accumulated matrix when tied).
    pub weights: Vec<DMatrix<f64>>,
    pub threshold: f64,
}

/// Loss and reverse-accumulated gradients through the K layers.
pub fn loss_and_gradients(
    net: &UnrolledNet,
    dataset: &[(DVector<f64>, DVector<f64>)],
    weight_decay: f64,
) -> Result<(f64, LossGradients)> {
    if dataset.is_empty() {
        return Err(Error::invalid_param("dataset", "must be non-empty"));
    }
    let n = net.state_dim();
    let mut grad_w0 = DMatrix::zeros(n, net.input_dim());
    let mut grad_weights: Vec<DMatrix<f64>> = net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    let mut grad_threshold = 0.0;
    let mut total = 0.0;
    let scale = 1.0 / dataset.len() as f64;
    let t = net.threshold;

    for (g, f_true) in dataset {
        let (out, acts) = forward(net, g, None)?;
        total += (&out - f_true).norm_squared();

        // recompute pre-activations layer by layer for the backward pass
        let injection = &net.w0 * g;
        let mut pres = Vec::with_capacity(net.depth());
        for k in 0..net.depth() {
            pres.push(net.layer_weight(k) * &acts[k] + &injection);
        }

        let mut delta_z = (&out - f_true) * (2.0 * scale);
        // contribution of z0 = W0 g flowing through the first layer is
        // handled inside the loop via the injection term of layer 0 plus the
        // direct z0 path accumulated after it.
        for k in (0..net.depth()).rev() {
            // delta at the pre-activation of layer k
            let delta_pre = DVector::from_fn(n, |i, _| delta_z[i] * soft_threshold_subgrad(pres[k][i], t));
            if net.tied() {
                grad_weights[0] += &delta_pre * acts[k].transpose();
            } else {
                grad_weights[k] += &delta_pre * acts[k].transpose();
            }
            grad_w0 += &delta_pre * g.transpose();
            for i in 0..n {
                grad_threshold += delta_pre[i] * (-pres[k][i].signum());
            }
            delta_z = net.layer_weight(k).transpose() * delta_pre;
        }
        // default z0 = W0 g: the remaining sensitivity flows into W0 as well
        grad_w0 += &delta_z * g.transpose();
    }

    grad_w0 += &net.w0 * (2.0 * weight_decay);
    for (gw, w) in grad_weights.iter_mut().zip(net.weights.iter()) {
        *gw += w * (2.0 * weight_decay);
    }

    let mut decay = net.w0.norm_squared();
    for w in &net.weights {
        decay += w.norm_squared();
    }
    let value = total * scale + weight_decay * decay;
    Ok((value, LossGradients { w0: grad_w0, weights: grad_weights, threshold: grad_threshold }))
}

/// Full-batch gradient descent with backtracking halving; the loss trace is
/// non-increasing. Tied nets accumulate all layer gradients into the shared
/// matrix.
pub fn train(
    net: &UnrolledNet,
    dataset: &[(DVector<f64>, DVector<f64>)],
    cfg: &TrainConfig,
) -> Result<(UnrolledNet, Vec<f64>)> {
    if cfg.learning_rate <= 0.0 {
        return Err(Error::invalid_param("learning_rate", "must be positive"));
    }
    if cfg.epochs == 0 {
        return Err(Error::invalid_param("epochs", "must be positive"));
    }
    let mut current = net.clone();
    let mut value = loss(&current, dataset, cfg.weight_decay)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut trace = vec![value];

    for _ in 0..cfg.epochs {
        let (_, grads) = loss_and_gradients(&current, dataset, cfg.weight_decay)?;
        let mut lr = cfg.learning_rate;
        let mut accepted = false;
        for _ in 0..30 {
            let mut candidate = current.clone();
            candidate.w0 -= &grads.w0 * lr;
            for (w, gw) in candidate.weights.iter_mut().zip(grads.weights.iter()) {
                *w -= gw * lr;
            }
            if cfg.learn_threshold {
                candidate.threshold = (candidate.threshold - lr * grads.threshold).max(0.0);
            }
            let cand_value = loss(&candidate, dataset, cfg.weight_decay)?;
            if !cand_value.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            if cand_value <= value {
                current = candidate;
                value = cand_value;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        trace.push(value);
        if !accepted {
            break; // no descent direction progress at any tried step
        }
    }
    Ok((current, trace))
}

#[derive(Debug, Serialize, Deserialize)]
struct NetManifest {
    k: usize,
    state_dim: usize,
    input_dim: usize,
    tied: bool,
    threshold: f64,
}

/// Saves the weights as a flat CSV bundle (`W0` rows first, then each stored
/// layer matrix) plus a JSON manifest with the shape metadata.
pub fn save_net(net: &UnrolledNet, weights_csv: &Path, manifest_json: &Path) -> Result<()> {
    let manifest = NetManifest {
        k: net.depth(),
        state_dim: net.state_dim(),
        input_dim: net.input_dim(),
        tied: net.tied(),
        threshold: net.threshold(),
    };
    let file = std::fs::File::create(manifest_json)?;
    serde_json::to_writer_pretty(file, &manifest).map_err(|e| Error::Parse(e.to_string()))?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(weights_csv)?);
    let write_matrix = |m: &DMatrix<f64>, w: &mut dyn Write| -> Result<()> {
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    };
    write_matrix(&net.w0, &mut w)?;
    for wm in &net.weights {
        write_matrix(wm, &mut w)?;
    }
    Ok(())
}

/// Loads a network saved by [`save_net`].
pub fn load_net(weights_csv: &Path, manifest_json: &Path) -> Result<UnrolledNet> {
    let manifest: NetManifest = serde_json::from_reader(std::fs::File::open(manifest_json)?)
        .map_err(|e| Error::Parse(e.to_string()))?;
    let all = crate::operator::matrix_from_csv(weights_csv)?;
    let n = manifest.state_dim;
    let stored = if manifest.tied { 1 } else { manifest.k };
    let expected_rows = n + stored * n;
    if all.nrows() != expected_rows || all.ncols() < manifest.input_dim.min(n) {
        return Err(Error::Parse(format!(
            "weight bundle has {} rows, expected {expected_rows}",
            all.nrows()
        )));
    }
    // W0 is N x M; layer matrices are N x N. The CSV is ragged-free only if
    // M == N padding is unnecessary, so the bundle stores W0 and layers in
    // separate row blocks of their own widths; re-slice accordingly.
    let w0 = DMatrix::from_fn(n, manifest.input_dim, |i, j| all[(i, j)]);
    let mut weights = Vec::with_capacity(stored);
    for s in 0..stored {
        let base = n + s * n;
        weights.push(DMatrix::from_fn(n, n, |i, j| all[(base + i, j)]));
    }
    UnrolledNet::new(w0, weights, manifest.threshold, manifest.tied)?.with_depth(manifest.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};

    #[test]
    fn soft_threshold_definition() {
        let out = soft_threshold(&dvector![3.0, -0.5, 0.0], 1.0).unwrap();
        assert_eq!(out, dvector![2.0, 0.0, 0.0]);
        let id = soft_threshold(&dvector![1.5, -2.5], 0.0).unwrap();
        assert_eq!(id, dvector![1.5, -2.5]);
        let neg = soft_threshold(&dvector![-2.5], 1.0).unwrap();
        assert_eq!(neg, dvector![-1.5]);
        assert!(soft_threshold(&dvector![1.0], -0.1).is_err());
    }

    #[test]
    fn soft_threshold_nonexpansive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0));
            let y = DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0));
            let t = rng.gen_range(0.0..2.0);
            let sx = soft_threshold(&x, t).unwrap();
            let sy = soft_threshold(&y, t).unwrap();
            assert!((sx - sy).norm() <= (x - y).norm() + 1e-14);
        }
    }

    #[test]
    fn ista_weights_identity_operator() {
        let op = LinearOperator::dense(DMatrix::identity(2, 2));
        let (net, status) = build_ista_net(&op, 0.5, 0.0, 3, true).unwrap();
        assert!(status.alpha_within_bound);
        assert_abs_diff_eq!((net.w0() - DMatrix::identity(2, 2) * 0.5).norm(), 0.0);
        assert_abs_diff_eq!((net.layer_weight(0) - DMatrix::identity(2, 2) * 0.5).norm(), 0.0);
    }

    #[test]
    fn power_iteration_matches_dense_eigenvalues() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let h = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
        let op = LinearOperator::dense(h.clone());
        let estimated = spectral_norm_sq(&op, 500, 3).unwrap();
        let exact = (h.transpose() * &h)
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        assert!((estimated - exact).abs() <= 1e-6 * exact);
    }

    #[test]
    fn tied_stores_one_matrix_untied_stores_k() {
        let op = LinearOperator::dense(DMatrix::identity(3, 3));
        let (tied, _) = build_ista_net(&op, 0.5, 0.1, 4, true).unwrap();
        let (untied, _) = build_ista_net(&op, 0.5, 0.1, 4, false).unwrap();
        assert_eq!(tied.weight_matrices().len(), 1);
        assert_eq!(tied.depth(), 4);
        assert_eq!(untied.weight_matrices().len(), 4);
        for k in 0..4 {
            assert_eq!(untied.layer_weight(k), tied.layer_weight(0));
        }
    }

    #[test]
    fn alpha_beyond_bound_warns_but_builds() {
        let op = LinearOperator::dense(DMatrix::identity(2, 2) * 2.0);
        // spectral norm squared is 4, bound is 0.25
        let (_, status) = build_ista_net(&op, 1.0, 0.0, 1, true).unwrap();
        assert!(!status.alpha_within_bound);
    }

    #[test]
    fn one_layer_exact_recovery_identity() {
        // H = I, alpha = 1: W = 0, so z1 = W0 g = g
        let op = LinearOperator::dense(DMatrix::identity(3, 3));
        let (net, _) = build_ista_net(&op, 1.0, 0.0, 1, true).unwrap();
        let g = dvector![1.0, -2.0, 0.5];
        let (out, acts) = forward(&net, &g, None).unwrap();
        assert_abs_diff_eq!((out - &g).norm(), 0.0, epsilon = 1e-14);
        assert_eq!(acts.len(), 2);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let op = LinearOperator::dense(DMatrix::identity(3, 3));
        let (net, _) = build_ista_net(&op, 0.5, 0.2, 4, true).unwrap();
        let z0 = DVector::zeros(3);
        let (out, _) = forward(&net, &DVector::zeros(3), Some(&z0)).unwrap();
        assert_eq!(out, DVector::zeros(3));
    }

    #[test]
    fn forward_matches_ista_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for &k in &[1usize, 8, 64] {
            let h = DMatrix::from_fn(6, 5, |_, _| rng.gen_range(-1.0..1.0));
            let op = LinearOperator::dense(h);
            let bound = 1.0 / spectral_norm_sq(&op, 300, 5).unwrap();
            let alpha = 0.9 * bound;
            let t = 0.05;
            let (net, _) = build_ista_net(&op, alpha, t, k, true).unwrap();
            let g = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
            let (out, _) = forward(&net, &g, None).unwrap();
            let oracle = ista_reference(&op, &g, alpha, t, k, None).unwrap();
            let diff = (out - oracle).amax();
            assert!(diff <= 1e-12, "K={k}: max abs diff {diff}");
        }
    }

    #[test]
    fn ista_scalar_hand_computed() {
        // H = 2, g = 4, alpha = 0.2, t = 0, K = 1, z0 = 0:
        // z = s(0 - 0.2*2*(0 - 4)) = 1.6
        let op = LinearOperator::dense(DMatrix::from_element(1, 1, 2.0));
        let z0 = dvector![0.0];
        let z = ista_reference(&op, &dvector![4.0], 0.2, 0.0, 1, Some(&z0)).unwrap();
        assert_abs_diff_eq!(z[0], 1.6, epsilon = 1e-15);
    }

    #[test]
    fn ista_converges_to_least_squares() {
        // threshold 0, consistent square system: ISTA converges to H^-1 g
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let h = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.5 } else { rng.gen_range(-0.2..0.2) });
        let op = LinearOperator::dense(h.clone());
        let f_true = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let g = &h * &f_true;
        let alpha = 0.9 / spectral_norm_sq(&op, 300, 7).unwrap();
        let z = ista_reference(&op, &g, alpha, 0.0, 5000, None).unwrap();
        let solution = h.lu().solve(&g).unwrap();
        assert!((z - solution).norm() < 1e-6);
    }

    #[test]
    fn loss_perfect_net_leaves_decay_only() {
        let op = LinearOperator::dense(DMatrix::identity(2, 2));
        let (net, _) = build_ista_net(&op, 0.5, 0.1, 3, true).unwrap();
        let g = dvector![1.0, -0.3];
        let (out, _) = forward(&net, &g, None).unwrap();
        let dataset = vec![(g, out)];
        let wd = 0.01;
        let expected_decay = wd * (net.w0().norm_squared() + net.layer_weight(0).norm_squared());
        assert_abs_diff_eq!(loss(&net, &dataset, wd).unwrap(), expected_decay, epsilon = 1e-14);
    }

    #[test]
    fn loss_zero_net_returns_target_energy() {
        let w0 = DMatrix::zeros(2, 2);
        let net = UnrolledNet::new(w0, vec![DMatrix::zeros(2, 2)], 0.0, true)
            .unwrap()
            .with_depth(2)
            .unwrap();
        let dataset = vec![
            (dvector![1.0, 1.0], dvector![3.0, 4.0]),
            (dvector![0.0, 1.0], dvector![0.0, 2.0]),
        ];
        let expected = (25.0 + 4.0) / 2.0;
        assert_abs_diff_eq!(loss(&net, &dataset, 0.0).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn loss_single_pair_hand_computed() {
        // one untied layer, t = 0.5, 2-D, done by hand:
        // z0 = W0 g = (1, 0.5); pre = W z0 + W0 g = (2, 1); z1 = (1.5, 0.5)
        let w0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]);
        let w = DMatrix::identity(2, 2);
        let net = UnrolledNet::new(w0, vec![w], 0.5, false).unwrap();
        let dataset = vec![(dvector![1.0, 1.0], dvector![1.0, 1.0])];
        // error = (0.5, -0.5) -> squared norm 0.5
        assert_abs_diff_eq!(loss(&net, &dataset, 0.0).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn empty_dataset_rejected() {
        let op = LinearOperator::dense(DMatrix::identity(2, 2));
        let (net, _) = build_ista_net(&op, 0.5, 0.0, 1, true).unwrap();
        assert!(loss(&net, &[], 0.0).is_err());
    }

    /// Screens a dataset so that every pre-activation stays at least 1e-3
    /// away from the threshold kink, then checks reverse-mode gradients
    /// against central finite differences.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let h = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.7..0.7));
        let op = LinearOperator::dense(h);
        let alpha = 0.8 / spectral_norm_sq(&op, 300, 9).unwrap();
        let t = 0.1;
        for tied in [true, false] {
            let (net, _) = build_ista_net(&op, alpha, t, 3, tied).unwrap();
            let dataset: Vec<_> = (0..3)
                .map(|_| {
                    loop {
                        let g = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
                        if preactivations_clear_of_kink(&net, &g, 1e-3) {
                            let f = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
                            return (g, f);
                        }
                    }
                })
                .collect();
            let (_, grads) = loss_and_gradients(&net, &dataset, 0.01).unwrap();
            let eps = 1e-5;

            // spot-check a handful of W0 and layer entries
            for &(i, j) in &[(0usize, 0usize), (1, 2), (3, 1)] {
                let fd = {
                    let mut p = net.clone();
                    p.w0[(i, j)] += eps;
                    let mut m = net.clone();
                    m.w0[(i, j)] -= eps;
                    (loss(&p, &dataset, 0.01).unwrap() - loss(&m, &dataset, 0.01).unwrap()) / (2.0 * eps)
                };
                let an = grads.w0[(i, j)];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "W0[{i},{j}]: fd={fd} an={an}");
            }
            for &(i, j) in &[(0usize, 1usize), (2, 2)] {
                let fd = {
                    let mut p = net.clone();
                    p.weights[0][(i, j)] += eps;
                    let mut m = net.clone();
                    m.weights[0][(i, j)] -= eps;
                    (loss(&p, &dataset, 0.01).unwrap() - loss(&m, &dataset, 0.01).unwrap()) / (2.0 * eps)
                };
                let an = grads.weights[0][(i, j)];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "W[{i},{j}]: fd={fd} an={an}");
            }
        }
    }

    fn preactivations_clear_of_kink(net: &UnrolledNet, g: &DVector<f64>, margin: f64) -> bool {
        let injection = net.w0() * g;
        let mut z = injection.clone();
        for k in 0..net.depth() {
            let pre = net.layer_weight(k) * &z + &injection;
            if pre.iter().any(|v| (v.abs() - net.threshold()).abs() < margin) {
                return false;
            }
            z = soft_threshold(&pre, net.threshold()).unwrap();
        }
        true
    }

    #[test]
    fn training_trace_non_increasing() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let h = DMatrix::from_fn(5, 4, |_, _| rng.gen_range(-0.8..0.8));
        let op = LinearOperator::dense(h.clone());
        let alpha = 0.9 / spectral_norm_sq(&op, 300, 11).unwrap();
        let (net, _) = build_ista_net(&op, alpha, 0.02, 4, true).unwrap();
        let dataset: Vec<_> = (0..8)
            .map(|_| {
                let f = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
                let g = &h * &f;
                (g, f)
            })
            .collect();
        let cfg = TrainConfig { learning_rate: 1e-2, epochs: 60, ..TrainConfig::default() };
        let (trained, trace) = train(&net, &dataset, &cfg).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-14, "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(loss(&trained, &dataset, 0.0).unwrap() <= loss(&net, &dataset, 0.0).unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let op = LinearOperator::dense(DMatrix::from_row_slice(3, 3, &[
            1.0, 0.2, 0.0, 0.1, 0.9, 0.0, 0.0, 0.0, 1.1,
        ]));
        let (net, _) = build_ista_net(&op, 0.3, 0.07, 5, false).unwrap();
        let wpath = dir.path().join("weights.csv");
        let mpath = dir.path().join("net.json");
        save_net(&net, &wpath, &mpath).unwrap();
        let loaded = load_net(&wpath, &mpath).unwrap();
        assert_eq!(loaded.depth(), 5);
        assert!(!loaded.tied());
        assert_abs_diff_eq!(loaded.threshold(), 0.07);
        assert!((loaded.w0() - net.w0()).norm() < 1e-12);
        for k in 0..5 {
            assert!((loaded.layer_weight(k) - net.layer_weight(k)).norm() < 1e-12);
        }
    }
}
