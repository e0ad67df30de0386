//! Artifact writers: 16-bit binary PGM with recorded quantization range,
//! CSV float arrays, and a reader for round-trip checks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// The affine quantization used when a float image was written to PGM;
/// recorded in the run manifest so the mapping is invertible.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Quantization {
    pub lo: f64,
    pub hi: f64,
}

/// Writes a float image as 16-bit big-endian binary PGM, mapping
/// `[min, max]` linearly onto `[0, 65535]`. A constant image maps to 0.
pub fn write_pgm_f64(path: &Path, img: &DMatrix<f64>) -> Result<Quantization> {
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite(format!("image {}", path.display())));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P5\n{} {}\n65535\n", img.ncols(), img.nrows())?;
    for i in 0..img.nrows() {
        for j in 0..img.ncols() {
            let q = (((img[(i, j)] - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16;
            w.write_all(&q.to_be_bytes())?;
        }
    }
    Ok(Quantization { lo, hi })
}

/// Writes an integer label image as binary PGM with the given maxval
/// (one byte per pixel for maxval < 256).
pub fn write_pgm_labels(path: &Path, labels: &DMatrix<u8>, maxval: u8) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P5\n{} {}\n{}\n", labels.ncols(), labels.nrows(), maxval)?;
    for i in 0..labels.nrows() {
        for j in 0..labels.ncols() {
            w.write_all(&[labels[(i, j)].min(maxval)])?;
        }
    }
    Ok(())
}

/// Reads back a binary PGM written by this module (16-bit or 8-bit).
pub fn read_pgm(path: &Path) -> Result<(DMatrix<u16>, u32)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let header_end = raw
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::Parse("truncated PGM header".into()))?;
    let header = std::str::from_utf8(&raw[..header_end]).map_err(|e| Error::Parse(e.to_string()))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("P5") {
        return Err(Error::Parse("not a binary PGM".into()));
    }
    let cols: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse("bad PGM width".into()))?;
    let rows: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse("bad PGM height".into()))?;
    let maxval: u32 = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse("bad PGM maxval".into()))?;
    let body = &raw[header_end + 1..];
    let data = if maxval > 255 {
        if body.len() < rows * cols * 2 {
            return Err(Error::Parse("truncated PGM body".into()));
        }
        DMatrix::from_fn(rows, cols, |i, j| {
            let k = 2 * (i * cols + j);
            u16::from_be_bytes([body[k], body[k + 1]])
        })
    } else {
        if body.len() < rows * cols {
            return Err(Error::Parse("truncated PGM body".into()));
        }
        DMatrix::from_fn(rows, cols, |i, j| body[i * cols + j] as u16)
    };
    Ok((data, maxval))
}

/// Writes a float matrix as CSV, one row per line, shortest round-trip
/// float formatting (bit-stable across runs).
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes an integer label matrix as CSV.
pub fn write_labels_csv(path: &Path, m: &DMatrix<u8>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
