//! Synthetic piecewise-constant phantoms: 1–5 non-overlapping disks or
//! rectangles at three foreground levels over a uniform background.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    Disks,
    Rectangles,
    Mixed,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    /// Temperature field; every pixel holds one of the four level values.
    pub pixels: DMatrix<f64>,
    /// Ground-truth level index per pixel, in {0, 1, 2, 3}.
    pub labels: DMatrix<u8>,
    pub level_values: [f64; 4],
    pub kind: PhantomKind,
    pub seed: u64,
}

const PLACEMENT_RETRIES: usize = 500;

/// Generates a phantom with `num_shapes` in `[min_shapes, max_shapes]`
/// non-overlapping shapes at levels 1–3 over the level-0 background.
/// Seeded and fully deterministic.
pub fn generate_phantom(
    kind: PhantomKind,
    rows: usize,
    cols: usize,
    level_values: [f64; 4],
    min_shapes: usize,
    max_shapes: usize,
    seed: u64,
) -> Result<Phantom> {
    if rows < 8 || cols < 8 {
        return Err(Error::invalid_param("size", "phantom must be at least 8x8"));
    }
    if min_shapes > max_shapes || max_shapes > 5 {
        return Err(Error::invalid_param("shapes", "shape count range must satisfy min <= max <= 5"));
    }
    for w in level_values.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid_param("level_values", "must be strictly increasing"));
        }
    }
    if level_values[0] < 0.0 || level_values[3] > 1.0 {
        return Err(Error::invalid_param("level_values", "must lie in [0, 1]"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = DMatrix::<u8>::zeros(rows, cols);
    let num_shapes = if min_shapes == max_shapes {
        min_shapes
    } else {
        rng.gen_range(min_shapes..=max_shapes)
    };

    for _ in 0..num_shapes {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let level: u8 = rng.gen_range(1..=3);
            let disk = match kind {
                PhantomKind::Disks => true,
                PhantomKind::Rectangles => false,
                PhantomKind::Mixed => rng.gen_bool(0.5),
            };
            let mask = propose_shape(&mut rng, rows, cols, disk);
            if mask_free(&labels, &mask) {
                for &(i, j) in &mask {
                    labels[(i, j)] = level;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place shape without overlap after {PLACEMENT_RETRIES} attempts"
            )));
        }
    }

    let pixels = labels.map(|l| level_values[l as usize]);
    Ok(Phantom { pixels, labels, level_values, kind, seed })
}

fn propose_shape(rng: &mut ChaCha8Rng, rows: usize, cols: usize, disk: bool) -> Vec<(usize, usize)> {
    let min_dim = rows.min(cols);
    let r_lo = (min_dim / 10).max(1);
    let r_hi = (min_dim / 4).max(r_lo + 1);
    let mut mask = Vec::new();
    if disk {
        let radius = rng.gen_range(r_lo..r_hi) as f64;
        let ci = rng.gen_range(0..rows) as f64;
        let cj = rng.gen_range(0..cols) as f64;
        for i in 0..rows {
            for j in 0..cols {
                let di = i as f64 - ci;
                let dj = j as f64 - cj;
                if di * di + dj * dj <= radius * radius {
                    mask.push((i, j));
                }
            }
        }
    } else {
        let hi = rng.gen_range(r_lo..r_hi);
        let hj = rng.gen_range(r_lo..r_hi);
        let ci = rng.gen_range(0..rows) as i64;
        let cj = rng.gen_range(0..cols) as i64;
        for i in (ci - hi as i64).max(0)..(ci + hi as i64 + 1).min(rows as i64) {
            for j in (cj - hj as i64).max(0)..(cj + hj as i64 + 1).min(cols as i64) {
                mask.push((i as usize, j as usize));
            }
        }
    }
    mask
}

/// A shape may be placed only where the background (and a one-pixel margin
/// around existing shapes) is untouched.
fn mask_free(labels: &DMatrix<u8>, mask: &[(usize, usize)]) -> bool {
    if mask.is_empty() {
        return false;
    }
    let (rows, cols) = (labels.nrows() as i64, labels.ncols() as i64);
    for &(i, j) in mask {
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let ni = i as i64 + di;
                let nj = j as i64 + dj;
                if ni >= 0 && ni < rows && nj >= 0 && nj < cols && labels[(ni as usize, nj as usize)] != 0 {
                    return false;
                }
            }
        }
    }
    true
}
