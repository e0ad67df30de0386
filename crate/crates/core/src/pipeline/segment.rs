//! Four-level threshold segmentation and threshold selection policies.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Labels each pixel 0..3 by three strictly increasing thresholds:
/// 0 below `t1`, 1 in `[t1, t2)`, 2 in `[t2, t3)`, 3 at or above `t3`.
pub fn segment_levels(img: &DMatrix<f64>, thresholds: [f64; 3]) -> Result<DMatrix<u8>> {
    if !(thresholds[0] < thresholds[1] && thresholds[1] < thresholds[2]) {
        return Err(Error::invalid_param("thresholds", "must be strictly increasing"));
    }
    Ok(img.map(|v| {
        if v < thresholds[0] {
            0u8
        } else if v < thresholds[1] {
            1
        } else if v < thresholds[2] {
            2
        } else {
            3
        }
    }))
}

/// Thresholds halfway between consecutive level values.
pub fn midpoint_thresholds(level_values: [f64; 4]) -> [f64; 3] {
    [
        0.5 * (level_values[0] + level_values[1]),
        0.5 * (level_values[1] + level_values[2]),
        0.5 * (level_values[2] + level_values[3]),
    ]
}

/// Thresholds at the given quantiles of the image intensity distribution
/// (nearest-rank on the sorted pixel values).
pub fn quantile_thresholds(img: &DMatrix<f64>, quantiles: [f64; 3]) -> Result<[f64; 3]> {
    for w in quantiles.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid_param("quantiles", "must be strictly increasing"));
        }
    }
    if quantiles[0] <= 0.0 || quantiles[2] >= 1.0 {
        return Err(Error::invalid_param("quantiles", "must lie strictly inside (0, 1)"));
    }
    let mut sorted: Vec<f64> = img.iter().cloned().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let pick = |q: f64| sorted[(((n as f64) * q).ceil() as usize).clamp(1, n) - 1];
    let t = [pick(quantiles[0]), pick(quantiles[1]), pick(quantiles[2])];
    if !(t[0] < t[1] && t[1] < t[2]) {
        return Err(Error::Degenerate);
    }
    Ok(t)
}
