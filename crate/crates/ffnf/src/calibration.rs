//! Calibration-set generation, loading, and saving.
//!
//! File format: a sequence of records `[u32 n][u32 d_e][n * d_e f64]`, all
//! little-endian. Every record must share the first record's d_e.

use std::fs;
use std::path::Path;

use crate::error::{IoError, Result};
use ffnf_core::dependency::CalibrationSet;
use ffnf_core::rng::SplitMix64;
use ffnf_core::Matrix;

/// Deterministic calibration data: `count` samples of `n` tokens each,
/// entries uniform in [-1, 1) from splitmix64.
pub fn generate_calibration(seed: u64, count: usize, n: usize, d_e: usize) -> Result<CalibrationSet> {
    if count == 0 || n == 0 || d_e == 0 {
        return Err(ffnf_core::Error::InvalidArgument(
            "count, n, and d_e must all be >= 1".into(),
        )
        .into());
    }
    let mut rng = SplitMix64::new(seed);
    let samples = (0..count)
        .map(|_| {
            let data = (0..n * d_e).map(|_| rng.uniform(-1.0, 1.0)).collect();
            Matrix::from_vec(n, d_e, data).expect("sized by construction")
        })
        .collect();
    Ok(CalibrationSet::new(samples)?)
}

pub fn save_calibration(set: &CalibrationSet, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for sample in &set.samples {
        out.extend_from_slice(&(sample.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(sample.cols() as u32).to_le_bytes());
        for v in sample.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| IoError::io(path, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::CorruptCalibration {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn load_calibration(path: &Path) -> Result<CalibrationSet> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    let mut samples = Vec::new();
    let mut pos = 0;
    let mut set_d_e: Option<usize> = None;
    while pos < bytes.len() {
        if bytes.len() - pos < 8 {
            return Err(corrupt(path, "truncated record header"));
        }
        let n = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let d_e = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if n == 0 || d_e == 0 {
            return Err(corrupt(path, "record with zero dimension"));
        }
        match set_d_e {
            None => set_d_e = Some(d_e),
            Some(first) if first != d_e => {
                return Err(corrupt(
                    path,
                    format!("record d_e {d_e} mismatches the set's first record ({first})"),
                ));
            }
            _ => {}
        }
        let payload = n * d_e * 8;
        if bytes.len() - pos < payload {
            return Err(corrupt(path, "truncated record payload"));
        }
        let data: Vec<f64> = bytes[pos..pos + payload]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += payload;
        samples.push(Matrix::from_vec(n, d_e, data).expect("sized read"));
    }
    if samples.is_empty() {
        return Err(corrupt(path, "no records"));
    }
    Ok(CalibrationSet::new(samples)?)
}
