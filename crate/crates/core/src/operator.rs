//! Linear forward operators: dense matrices and 2-D convolution by a PSF
//! kernel with zero-padded ("same" size) boundaries, each with an explicit
//! adjoint.

use nalgebra::{DMatrix, DVector};
use std::path::Path;

use crate::error::{Error, Result};

/// Unknown-count cap for dense materialization of matrix-free operators.
pub const DENSE_CAP: usize = 4096;

#[derive(Debug, Clone)]
pub enum LinearOperator {
    Dense(DMatrix<f64>),
    /// Zero-padded same-size 2-D convolution of a `rows x cols` image by an
    /// odd-sized PSF kernel. With zero padding the adjoint is exactly the
    /// correlation with the flipped kernel.
    Convolution2d {
        kernel: DMatrix<f64>,
        rows: usize,
        cols: usize,
    },
}

impl LinearOperator {
    pub fn dense(matrix: DMatrix<f64>) -> Self {
        LinearOperator::Dense(matrix)
    }

    pub fn convolution2d(kernel: DMatrix<f64>, rows: usize, cols: usize) -> Result<Self> {
        if kernel.nrows() % 2 == 0 || kernel.ncols() % 2 == 0 {
            return Err(Error::invalid_param("kernel", "PSF kernel must be odd-sized"));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::invalid_param("size", "image dimensions must be positive"));
        }
        Ok(LinearOperator::Convolution2d { kernel, rows, cols })
    }

    /// Number of unknowns `N`.
    pub fn input_dim(&self) -> usize {
        match self {
            LinearOperator::Dense(m) => m.ncols(),
            LinearOperator::Convolution2d { rows, cols, .. } => rows * cols,
        }
    }

    /// Number of observations `M` (same-size output for convolution).
    pub fn output_dim(&self) -> usize {
        match self {
            LinearOperator::Dense(m) => m.nrows(),
            LinearOperator::Convolution2d { rows, cols, .. } => rows * cols,
        }
    }

    /// `H f`.
    pub fn apply(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        if f.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: f.len(),
            });
        }
        match self {
            LinearOperator::Dense(m) => Ok(m * f),
            LinearOperator::Convolution2d { kernel, rows, cols } => {
                Ok(convolve(kernel, f, *rows, *cols, false))
            }
        }
    }

    /// `H^T g`.
    pub fn apply_adjoint(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        if g.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: g.len(),
            });
        }
        match self {
            LinearOperator::Dense(m) => Ok(m.transpose() * g),
            LinearOperator::Convolution2d { kernel, rows, cols } => {
                Ok(convolve(kernel, g, *rows, *cols, true))
            }
        }
    }

    /// Dense `M x N` materialization, built column-by-column from `apply`.
    /// Fails with a capacity error above [`DENSE_CAP`] unknowns.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        match self {
            LinearOperator::Dense(m) => Ok(m.clone()),
            LinearOperator::Convolution2d { .. } => {
                let n = self.input_dim();
                if n > DENSE_CAP {
                    return Err(Error::Capacity(format!(
                        "dense materialization needs {n} unknowns, cap is {DENSE_CAP}"
                    )));
                }
                let m = self.output_dim();
                let mut out = DMatrix::zeros(m, n);
                let mut basis = DVector::zeros(n);
                for j in 0..n {
                    basis[j] = 1.0;
                    out.set_column(j, &self.apply(&basis)?);
                    basis[j] = 0.0;
                }
                Ok(out)
            }
        }
    }

    /// `H^T H` as a dense `N x N` matrix. For convolution operators this is
    /// assembled via matrix-free applies instead of a dense product.
    pub fn gram_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.input_dim();
        if n > DENSE_CAP {
            return Err(Error::Capacity(format!(
                "gram matrix needs {n} unknowns, cap is {DENSE_CAP}"
            )));
        }
        match self {
            LinearOperator::Dense(m) => Ok(m.transpose() * m),
            LinearOperator::Convolution2d { .. } => {
                let mut out = DMatrix::zeros(n, n);
                let mut basis = DVector::zeros(n);
                for j in 0..n {
                    basis[j] = 1.0;
                    let col = self.apply_adjoint(&self.apply(&basis)?)?;
                    out.set_column(j, &col);
                    basis[j] = 0.0;
                }
                // exact symmetrization against rounding in the assembly order
                Ok(crate::util::symmetrize(&out))
            }
        }
    }

    /// `H H^T` as a dense `M x M` matrix, same capacity rule.
    pub fn outer_gram_matrix(&self) -> Result<DMatrix<f64>> {
        let m = self.output_dim();
        if m > DENSE_CAP {
            return Err(Error::Capacity(format!(
                "outer gram matrix needs {m} outputs, cap is {DENSE_CAP}"
            )));
        }
        match self {
            LinearOperator::Dense(h) => Ok(h * h.transpose()),
            LinearOperator::Convolution2d { .. } => {
                let mut out = DMatrix::zeros(m, m);
                let mut basis = DVector::zeros(m);
                for j in 0..m {
                    basis[j] = 1.0;
                    let col = self.apply(&self.apply_adjoint(&basis)?)?;
                    out.set_column(j, &col);
                    basis[j] = 0.0;
                }
                Ok(crate::util::symmetrize(&out))
            }
        }
    }
}

/// Zero-padded convolution (`adjoint = false`) or its adjoint, the
/// correlation (`adjoint = true`), of a flattened row-major image.
fn convolve(kernel: &DMatrix<f64>, x: &DVector<f64>, rows: usize, cols: usize, adjoint: bool) -> DVector<f64> {
    let (kr, kc) = (kernel.nrows() as isize, kernel.ncols() as isize);
    let (hr, hc) = (kr / 2, kc / 2);
    let mut out = DVector::zeros(rows * cols);
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            let mut acc = 0.0;
            for ki in 0..kr {
                for kj in 0..kc {
                    let (sr, sc) = if adjoint {
                        (r + ki - hr, c + kj - hc)
                    } else {
                        (r - (ki - hr), c - (kj - hc))
                    };
                    if sr >= 0 && sr < rows as isize && sc >= 0 && sc < cols as isize {
                        acc += kernel[(ki as usize, kj as usize)]
                            * x[(sr * cols as isize + sc) as usize];
                    }
                }
            }
            out[(r * cols as isize + c) as usize] = acc;
        }
    }
    out
}

/// Parses a header-free, row-major CSV of decimal reals into a dense matrix.
pub fn matrix_from_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    matrix_from_csv_str(&text)
}

pub fn matrix_from_csv_str(text: &str) -> Result<DMatrix<f64>> {
    let mut data: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = data.first() {
            if row.len() != first.len() {
                return Err(Error::Parse(format!(
                    "line {}: ragged row ({} columns, expected {})",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        data.push(row);
    }
    if data.is_empty() {
        return Err(Error::Parse("empty CSV".into()));
    }
    let (nr, nc) = (data.len(), data[0].len());
    Ok(DMatrix::from_fn(nr, nc, |i, j| data[i][j]))
}

/// Delta kernel of the given odd size: identity under convolution.
pub fn delta_kernel(size: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(size, size);
    k[(size / 2, size / 2)] = 1.0;
    k
}

/// Normalized 2-D Gaussian PSF of the given odd size and width (pixels).
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<DMatrix<f64>> {
    if size % 2 == 0 {
        return Err(Error::invalid_param("size", "PSF kernel must be odd-sized"));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid_param("sigma", "must be positive"));
    }
    let h = (size / 2) as isize;
    let mut k = DMatrix::zeros(size, size);
    for i in -h..=h {
        for j in -h..=h {
            let r2 = (i * i + j * j) as f64;
            k[((i + h) as usize, (j + h) as usize)] = (-r2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.iter().sum();
    Ok(k / total)
}
