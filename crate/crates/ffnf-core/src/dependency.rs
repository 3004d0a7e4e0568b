//! Pairwise block-dependency matrix and per-layer explainability metrics
//! over a calibration set.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Block, Model};
use crate::ops::model_forward;
use crate::NORM_EPS;

/// Calibration samples: embedding matrices sharing d_e; token counts may
/// vary per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub samples: Vec<Matrix>,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Matrix>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidArgument("empty calibration set".into()));
        };
        let d_e = first.cols();
        for (i, s) in samples.iter().enumerate() {
            if s.cols() != d_e {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has d_e {}, set has {d_e}",
                    s.cols()
                )));
            }
            if s.rows() == 0 {
                return Err(Error::InvalidArgument(format!("sample {i} has no tokens")));
            }
        }
        Ok(CalibrationSet { samples })
    }

    pub fn embed_dim(&self) -> usize {
        self.samples[0].cols()
    }
}

/// m x m matrix of averaged cosine distances. Entry (i, j) for j > i is the
/// distance between block j's contribution with and without block i; the
/// diagonal and below are zero by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyMatrix {
    pub m: usize,
    values: Vec<f64>,
}

impl DependencyMatrix {
    pub fn zeros(m: usize) -> Self {
        DependencyMatrix {
            m,
            values: vec![0.0; m * m],
        }
    }

    pub fn from_values(m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != m * m {
            return Err(Error::ShapeMismatch(format!(
                "{m}x{m} matrix needs {} values, got {}",
                m * m,
                values.len()
            )));
        }
        Ok(DependencyMatrix { m, values })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.m + j] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }
}

/// 1 - a.b / (max(|a|, eps) max(|b|, eps)). Both norms below eps gives 0;
/// exactly one below gives 1.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "vector lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let na = libm::sqrt(na);
    let nb = libm::sqrt(nb);
    match (na < NORM_EPS, nb < NORM_EPS) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => Ok(1.0),
        (false, false) => {
            // exact results for exactly aligned inputs, where
            // sqrt(dot)^2 rounding would otherwise leave ~1e-16 residue
            if a == b {
                return Ok(0.0);
            }
            if a.iter().zip(b).all(|(x, y)| *x == -*y) {
                return Ok(2.0);
            }
            Ok(1.0 - dot / (na * nb))
        }
    }
}

fn require_sequential(model: &Model) -> Result<()> {
    if !model.has_singleton_stages() {
        return Err(Error::InvalidArgument(
            "dependency analysis requires singleton stages".into(),
        ));
    }
    Ok(())
}

fn with_block_dropped(model: &Model, i: usize) -> Model {
    let mut dropped = model.clone();
    dropped.blocks[i] = Block::identity();
    dropped.resync_config();
    dropped
}

/// Mean over tokens of the per-row cosine distance between two equally
/// shaped matrices, accumulated in row order.
fn mean_row_cosine_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..a.rows() {
        total += cosine_distance(a.row(t), b.row(t))?;
    }
    Ok(total / a.rows() as f64)
}

/// For each dropped block i and observed block j > i, the averaged cosine
/// distance between block j's contribution in the intact model and in the
/// model with block i replaced by the identity.
pub fn compute_dependency_matrix(model: &Model, data: &CalibrationSet) -> Result<DependencyMatrix> {
    require_sequential(model)?;
    let m = model.block_count();
    let mut matrix = DependencyMatrix::zeros(m);
    if m == 0 {
        return Ok(matrix);
    }

    // One baseline trace and one dropped trace per (sample, i); distances
    // accumulate sample-major then token-major so the result is identical
    // to any per-pair recomputation.
    let mut sums = vec![0.0; m * m];
    for sample in &data.samples {
        let (_, baseline) = model_forward(model, sample, true)?;
        let baseline = baseline.expect("capture requested");
        for i in 0..m {
            let dropped_model = with_block_dropped(model, i);
            let (_, dropped) = model_forward(&dropped_model, sample, true)?;
            let dropped = dropped.expect("capture requested");
            for j in (i + 1)..m {
                sums[i * m + j] +=
                    mean_row_cosine_distance(&baseline.contributions[j], &dropped.contributions[j])?;
            }
        }
    }
    let count = data.samples.len() as f64;
    for i in 0..m {
        for j in (i + 1)..m {
            matrix.set(i, j, sums[i * m + j] / count);
        }
    }
    Ok(matrix)
}

/// Entry j: mean cosine distance between each token row of block j's input
/// and the corresponding row of its output.
pub fn layer_direction_metric(model: &Model, data: &CalibrationSet) -> Result<Vec<f64>> {
    require_sequential(model)?;
    let m = model.block_count();
    let mut sums = vec![0.0; m];
    for sample in &data.samples {
        let (_, trace) = model_forward(model, sample, true)?;
        let trace = trace.expect("capture requested");
        for j in 0..m {
            let input = &trace.inputs[j];
            let output = input.add(&trace.contributions[j])?;
            sums[j] += mean_row_cosine_distance(input, &output)?;
        }
    }
    let count = data.samples.len() as f64;
    Ok(sums.into_iter().map(|s| s / count).collect())
}

/// Entry j: mean over tokens of |h_j row| / max(|X_j row|, eps).
pub fn layer_contribution_ratio(model: &Model, data: &CalibrationSet) -> Result<Vec<f64>> {
    require_sequential(model)?;
    let m = model.block_count();
    let mut sums = vec![0.0; m];
    for sample in &data.samples {
        let (_, trace) = model_forward(model, sample, true)?;
        let trace = trace.expect("capture requested");
        for j in 0..m {
            let input = &trace.inputs[j];
            let h = &trace.contributions[j];
            let mut total = 0.0;
            for t in 0..input.rows() {
                let norm = |row: &[f64]| libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                total += norm(h.row(t)) / norm(input.row(t)).max(NORM_EPS);
            }
            sums[j] += total / input.rows() as f64;
        }
    }
    let count = data.samples.len() as f64;
    Ok(sums.into_iter().map(|s| s / count).collect())
}
