//! Analytic tensor-parallel latency model: a per-stage ceil-shaped GEMM
//! term (wave quantization) plus a flat synchronization cost per stage.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{FfnWeights, Model};

/// Cost-model constants. `g` is the tensor-parallel degree, `t_sync` the
/// per-stage synchronization cost (all-reduce analog), `w_wave` the work
/// one worker completes per wave, `t_tile` the duration of one wave, and
/// `n` the token count of the modeled forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyParams {
    pub g: usize,
    pub t_sync: f64,
    pub w_wave: f64,
    pub t_tile: f64,
    pub n: usize,
}

impl Default for LatencyParams {
    fn default() -> Self {
        LatencyParams {
            g: 8,
            t_sync: 1e-4,
            w_wave: 1e6,
            t_tile: 1e-5,
            n: 64,
        }
    }
}

impl LatencyParams {
    pub fn validate(&self) -> Result<()> {
        if self.g == 0 {
            return Err(Error::InvalidArgument("g must be >= 1".into()));
        }
        if !(self.t_sync >= 0.0) {
            return Err(Error::InvalidArgument("t_sync must be >= 0".into()));
        }
        if !(self.w_wave > 0.0) {
            return Err(Error::InvalidArgument("w_wave must be > 0".into()));
        }
        if !(self.t_tile > 0.0) {
            return Err(Error::InvalidArgument("t_tile must be > 0".into()));
        }
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-stage latency breakdown, modeled or measured.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub stage_seconds: Vec<f64>,
    pub stage_flops: Vec<f64>,
    pub total_seconds: f64,
    pub tokens_per_second: f64,
    pub stage_count: usize,
    pub sync_count: usize,
}

impl BenchReport {
    pub fn from_stages(stage_seconds: Vec<f64>, stage_flops: Vec<f64>, n: usize) -> Self {
        let total_seconds: f64 = stage_seconds.iter().sum();
        let stage_count = stage_seconds.len();
        BenchReport {
            tokens_per_second: n as f64 / total_seconds,
            sync_count: stage_count,
            stage_count,
            total_seconds,
            stage_seconds,
            stage_flops,
        }
    }
}

/// Dense-GEMM flop count for one stage at `n` tokens: each FFN costs
/// 6 n d_e d_h (three GEMMs at 2 flops per MAC), each attention costs
/// 8 n d_e p for the projections plus 4 n^2 p for scores and values,
/// with p = n_heads * head_dim.
pub fn stage_flops(model: &Model, stage: &[usize], n: usize) -> Result<f64> {
    let d_e = model.config.d_e as f64;
    let nf = n as f64;
    let mut total = 0.0;
    for &idx in stage {
        let block = model
            .blocks
            .get(idx)
            .ok_or_else(|| Error::InvalidArgument(format!("block index {idx} out of range")))?;
        if let Some(ffn) = &block.ffn {
            total += 6.0 * nf * d_e * ffn.hidden_dim() as f64;
        }
        if let Some(attn) = &block.attn {
            let p = attn.proj_dim() as f64;
            total += 8.0 * nf * d_e * p + 4.0 * nf * nf * p;
        }
    }
    Ok(total)
}

/// Per-stage latency t_tile * ceil((flops / g) / w_wave) + t_sync, summed
/// over stages.
pub fn analytic_latency(model: &Model, params: &LatencyParams) -> Result<BenchReport> {
    params.validate()?;
    let mut seconds = Vec::with_capacity(model.stages.len());
    let mut flops = Vec::with_capacity(model.stages.len());
    for stage in &model.stages {
        let f = stage_flops(model, stage, params.n)?;
        let waves = libm::ceil((f / params.g as f64) / params.w_wave);
        seconds.push(params.t_tile * waves + params.t_sync);
        flops.push(f);
    }
    Ok(BenchReport::from_stages(seconds, flops, params.n))
}

/// Total fused-run hidden width helper used by tests constructing
/// exact-multiple flop counts.
pub fn ffn_hidden(model: &Model, idx: usize) -> usize {
    model.blocks[idx].ffn.as_ref().map_or(0, FfnWeights::hidden_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{apply_fusion_plan, plan_ffn_fusion, ScaleMode};
    use crate::model::seeded_model;
    use alloc::vec;

    #[test]
    fn stage_flops_hand_values() {
        let m = seeded_model(4, 0, 0, &[(false, 3), (false, 0)], 137);
        // FFN-only block, n=2, d_e=4, d_h=3 -> 6*2*4*3 = 144
        assert_eq!(stage_flops(&m, &[0], 2).unwrap(), 144.0);
        // identity block
        assert_eq!(stage_flops(&m, &[1], 2).unwrap(), 0.0);
        // additivity
        let m2 = seeded_model(4, 0, 0, &[(false, 3), (false, 3)], 139);
        assert_eq!(stage_flops(&m2, &[0, 1], 2).unwrap(), 288.0);
    }

    #[test]
    fn attention_flops() {
        let m = seeded_model(4, 2, 3, &[(true, 0)], 149);
        // p = 6: 8*n*d_e*p + 4*n^2*p with n=2 -> 8*2*4*6 + 4*4*6 = 384 + 96
        assert_eq!(stage_flops(&m, &[0], 2).unwrap(), 480.0);
    }

    #[test]
    fn pure_sync_cost() {
        let m = seeded_model(4, 0, 0, &[(false, 0)], 151);
        let p = LatencyParams {
            g: 1,
            t_sync: 1.0,
            w_wave: 1.0,
            t_tile: 1.0,
            n: 1,
        };
        let r = analytic_latency(&m, &p).unwrap();
        assert_eq!(r.total_seconds, 1.0);
        assert_eq!(r.sync_count, 1);
    }

    #[test]
    fn fusing_saves_exactly_sync_time_in_exact_division() {
        // Two FFN stages each with flops = g * w_wave: per-stage latency
        // t_tile + t_sync = 1.5; fusing gives 2 + 0.5 = 2.5, saving 0.5.
        // 6 * n * d_e * d_h = flops; choose n=1, d_e=4, d_h=2 -> 48.
        let m = seeded_model(4, 0, 0, &[(false, 2), (false, 2)], 157);
        let p = LatencyParams {
            g: 2,
            t_sync: 0.5,
            w_wave: 24.0,
            t_tile: 1.0,
            n: 1,
        };
        let sequential = analytic_latency(&m, &p).unwrap();
        assert_eq!(sequential.total_seconds, 3.0);
        let plan = plan_ffn_fusion(&m, 100, false, ScaleMode::Literal);
        let fused = apply_fusion_plan(&m, &plan).unwrap();
        let merged = analytic_latency(&fused, &p).unwrap();
        assert_eq!(merged.total_seconds, 2.5);
        assert!((sequential.total_seconds - merged.total_seconds - p.t_sync).abs() < 1e-15);
    }

    #[test]
    fn fused_latency_never_exceeds_sequential() {
        for seed in 0..10 {
            let m = seeded_model(
                8,
                0,
                0,
                &[(false, 5), (false, 9), (false, 3), (false, 7)],
                seed,
            );
            let p = LatencyParams {
                g: 3,
                t_sync: 2e-4,
                w_wave: 100.0,
                t_tile: 1e-5,
                n: 4,
            };
            let plan = plan_ffn_fusion(&m, 1_000, false, ScaleMode::Literal);
            let fused = apply_fusion_plan(&m, &plan).unwrap();
            let a = analytic_latency(&m, &p).unwrap().total_seconds;
            let b = analytic_latency(&fused, &p).unwrap().total_seconds;
            assert!(b <= a);
        }
    }

    #[test]
    fn sync_monotonicity() {
        let m = seeded_model(4, 1, 2, &[(true, 4), (false, 5)], 163);
        let base = LatencyParams::default();
        let more = LatencyParams {
            t_sync: base.t_sync * 2.0,
            ..base
        };
        let a = analytic_latency(&m, &base).unwrap().total_seconds;
        let b = analytic_latency(&m, &more).unwrap().total_seconds;
        assert!(b > a);
    }

    #[test]
    fn report_consistency() {
        let m = seeded_model(4, 1, 2, &[(true, 4), (false, 5)], 167);
        let p = LatencyParams::default();
        let r = analytic_latency(&m, &p).unwrap();
        assert_eq!(r.stage_count, 2);
        assert_eq!(r.sync_count, 2);
        assert!((r.tokens_per_second * r.total_seconds - p.n as f64).abs() < 1e-9);
        let sum: f64 = r.stage_seconds.iter().sum();
        assert_eq!(sum, r.total_seconds);
    }

    #[test]
    fn empty_stage_list() {
        let m = seeded_model(4, 0, 0, &[], 1);
        let r = analytic_latency(&m, &LatencyParams::default()).unwrap();
        assert_eq!(r.stage_count, 0);
        assert_eq!(r.total_seconds, 0.0);
    }
}
