//! Fidelity and segmentation metrics. PSNR uses the top level value as the
//! signal range and reports a perfect reconstruction as an `"inf"` sentinel
//! in JSON (JSON has no infinity literal).

use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A PSNR value; serializes as a JSON number, or the string `"inf"` when
/// the reconstruction is exact (RMSE zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr(pub f64);

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr(v)),
            Raw::Str(s) if s == "inf" => Ok(Psnr(f64::INFINITY)),
            Raw::Str(s) => Err(D::Error::custom(format!("unexpected PSNR value {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub psnr_observed: Psnr,
    pub psnr_reconstructed: Psnr,
    pub segmentation_accuracy: f64,
    /// Accuracy of segmenting the raw observation with the same thresholds;
    /// the baseline the reconstruction must beat.
    pub segmentation_accuracy_observed: f64,
    /// Per-level accuracy; `null` for levels absent from the ground truth.
    pub per_class_accuracy: [Option<f64>; 4],
}

pub fn rmse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(((a - b).norm_squared() / a.len() as f64).sqrt())
}

/// `20 log10(range / RMSE)`; infinite for an exact match.
pub fn psnr(reference: &DMatrix<f64>, estimate: &DMatrix<f64>, range: f64) -> Result<Psnr> {
    if range <= 0.0 {
        return Err(Error::invalid_param("range", "must be positive"));
    }
    let e = rmse(reference, estimate)?;
    if e == 0.0 {
        Ok(Psnr(f64::INFINITY))
    } else {
        Ok(Psnr(20.0 * (range / e).log10()))
    }
}

pub fn segmentation_accuracy(truth: &DMatrix<u8>, predicted: &DMatrix<u8>) -> Result<f64> {
    if truth.shape() != predicted.shape() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: predicted.len() });
    }
    let hits = truth.iter().zip(predicted.iter()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

pub fn per_class_accuracy(truth: &DMatrix<u8>, predicted: &DMatrix<u8>) -> Result<[Option<f64>; 4]> {
    if truth.shape() != predicted.shape() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: predicted.len() });
    }
    let mut hits = [0usize; 4];
    let mut totals = [0usize; 4];
    for (&t, &p) in truth.iter().zip(predicted.iter()) {
        let c = (t as usize).min(3);
        totals[c] += 1;
        if t == p {
            hits[c] += 1;
        }
    }
    let mut out = [None; 4];
    for c in 0..4 {
        if totals[c] > 0 {
            out[c] = Some(hits[c] as f64 / totals[c] as f64);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn compute_metrics(
    truth_pixels: &DMatrix<f64>,
    truth_labels: &DMatrix<u8>,
    observation: &DMatrix<f64>,
    reconstruction: &DMatrix<f64>,
    segmentation: &DMatrix<u8>,
    observation_segmentation: &DMatrix<u8>,
    range: f64,
) -> Result<Metrics> {
    Ok(Metrics {
        rmse: rmse(truth_pixels, reconstruction)?,
        psnr_observed: psnr(truth_pixels, observation, range)?,
        psnr_reconstructed: psnr(truth_pixels, reconstruction, range)?,
        segmentation_accuracy: segmentation_accuracy(truth_labels, segmentation)?,
        segmentation_accuracy_observed: segmentation_accuracy(truth_labels, observation_segmentation)?,
        per_class_accuracy: per_class_accuracy(truth_labels, segmentation)?,
    })
}
