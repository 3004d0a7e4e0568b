//! Acceptance suite: one test per release criterion, each printing a
//! pass line. Run with `cargo test -p ffnf --test acceptance -- --nocapture`
//! to see the lines.

use std::path::PathBuf;
use std::process::Command;
use std::time::Duration;

use ffnf::bench::wall_clock_bench;
use ffnf::calibration::generate_calibration;
use ffnf::checkpoint::{model_from_bytes, model_to_bytes};
use ffnf::IoError;
use ffnf_core::dependency::{compute_dependency_matrix, CalibrationSet, DependencyMatrix};
use ffnf_core::fusion::{
    apply_fusion_plan, forward_with_parallel_ranges, fuse_ffn_weights, plan_ffn_fusion,
    remove_ffns, reverse_ffn_range, BlockRange, ScaleMode,
};
use ffnf_core::latency::{analytic_latency, LatencyParams};
use ffnf_core::model::{generate_random_model, seeded_model, Block, BlockSpec, Dtype, FfnWeights, ModelConfig};
use ffnf_core::ops::{model_forward, swiglu_forward};
use ffnf_core::parallel::{greedy_select, window_stats};
use ffnf_core::rng::SplitMix64;
use ffnf_core::{Matrix, Model};

fn random_input(n: usize, d_e: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    Matrix::from_vec(n, d_e, (0..n * d_e).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn ffn_only_model(d_e: usize, hiddens: &[usize], seed: u64) -> Model {
    let config = ModelConfig {
        d_e,
        n_heads: 0,
        head_dim: 0,
        block_specs: hiddens
            .iter()
            .map(|&h| BlockSpec {
                has_attention: false,
                ffn_hidden: h,
            })
            .collect(),
        dtype: Dtype::F64,
    };
    generate_random_model(&config, seed).unwrap()
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn max_token_rel_diff(got: &Matrix, reference: &Matrix) -> f64 {
    let mut max = 0.0f64;
    for t in 0..got.rows() {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (a, b) in got.row(t).iter().zip(reference.row(t)) {
            diff += (a - b) * (a - b);
            norm += b * b;
        }
        max = max.max(diff.sqrt() / norm.sqrt().max(1e-12));
    }
    max
}

/// Criterion 1: fused-FFN forward equals the parallel sum over 200 seeded
/// cases (1-8 FFNs, d_e 4..64, d_h 1..96), max abs error < 1e-12.
#[test]
fn criterion_1_fusion_exactness() {
    let mut rng = SplitMix64::new(0xC1);
    let mut worst = 0.0f64;
    for case in 0..200u64 {
        let count = 1 + (rng.next_u64() % 8) as usize;
        let d_e = 4 + (rng.next_u64() % 61) as usize;
        let hiddens: Vec<usize> = (0..count).map(|_| 1 + (rng.next_u64() % 96) as usize).collect();
        let model = ffn_only_model(d_e, &hiddens, 0x1000 + case);
        let ffns: Vec<&FfnWeights> =
            model.blocks.iter().map(|b| b.ffn.as_ref().unwrap()).collect();
        let fused = fuse_ffn_weights(&ffns, None).unwrap();
        let x = random_input(4, d_e, 0x2000 + case);
        let got = swiglu_forward(&x, &fused).unwrap();
        let mut expect = Matrix::zeros(4, d_e);
        for f in &ffns {
            expect.add_assign(&swiglu_forward(&x, f).unwrap()).unwrap();
        }
        worst = worst.max(max_abs_diff(&got, &expect));
    }
    assert!(worst < 1e-12, "max abs error {worst}");
    println!("acceptance 1 fusion-exactness: PASS (max abs error {worst:e})");
}

/// Criterion 2: fused-model forward matches the original with planned
/// ranges evaluated via the parallel sum, in both scale modes, max
/// per-token relative error < 1e-9, over 50 seeded models with m <= 16.
#[test]
fn criterion_2_model_level_equivalence() {
    let mut rng = SplitMix64::new(0xC2);
    let mut worst = 0.0f64;
    let mut fused_models = 0;
    for case in 0..50u64 {
        let m = 2 + (rng.next_u64() % 15) as usize;
        let specs: Vec<(bool, usize)> = (0..m)
            .map(|_| {
                let attention = rng.next_f64() < 0.35;
                (attention, 1 + (rng.next_u64() % 12) as usize)
            })
            .collect();
        let model = seeded_model(6, 1, 3, &specs, 0x3000 + case);
        let x = random_input(3, 6, 0x4000 + case);
        for mode in [ScaleMode::Literal, ScaleMode::Folded] {
            let plan = plan_ffn_fusion(&model, 48, false, mode);
            if plan.ranges.is_empty() {
                continue;
            }
            fused_models += 1;
            let fused = apply_fusion_plan(&model, &plan).unwrap();
            let (got, _) = model_forward(&fused, &x, false).unwrap();
            let reference =
                forward_with_parallel_ranges(&model, &x, &plan.ranges, mode).unwrap();
            worst = worst.max(max_token_rel_diff(&got, &reference));
        }
    }
    assert!(fused_models > 20, "too few fusible cases ({fused_models})");
    assert!(worst < 1e-9, "max relative error {worst}");
    println!("acceptance 2 model-equivalence: PASS (max rel error {worst:e}, {fused_models} fused cases)");
}

/// Criterion 3: trace-based dependency matrix equals the per-pair
/// brute-force recomputation to < 1e-12 abs, entries in [0,2], lower
/// triangle zero, zero-contribution rows zero.
#[test]
fn criterion_3_dependency_oracle() {
    fn brute_force(model: &Model, data: &CalibrationSet) -> DependencyMatrix {
        let m = model.block_count();
        let mut out = DependencyMatrix::zeros(m);
        for i in 0..m {
            for j in (i + 1)..m {
                let mut total = 0.0;
                for sample in &data.samples {
                    let (_, base) = model_forward(model, sample, true).unwrap();
                    let mut dropped_model = model.clone();
                    dropped_model.blocks[i] = Block::identity();
                    dropped_model.resync_config();
                    let (_, dropped) = model_forward(&dropped_model, sample, true).unwrap();
                    let (base, dropped) = (base.unwrap(), dropped.unwrap());
                    let (hb, hd) = (&base.contributions[j], &dropped.contributions[j]);
                    let mut per_sample = 0.0;
                    for t in 0..hb.rows() {
                        per_sample +=
                            ffnf_core::dependency::cosine_distance(hb.row(t), hd.row(t)).unwrap();
                    }
                    total += per_sample / hb.rows() as f64;
                }
                out.set(i, j, total / data.samples.len() as f64);
            }
        }
        out
    }

    let mut worst = 0.0f64;
    for case in 0..8u64 {
        let m = 3 + (case % 4) as usize;
        let specs: Vec<(bool, usize)> = (0..m)
            .map(|i| ((i + case as usize) % 3 == 0, 3 + (i % 4)))
            .collect();
        let model = seeded_model(5, 1, 2, &specs, 0x5000 + case);
        let samples = 1 + (case % 4) as usize;
        let data = generate_calibration(0x6000 + case, samples, 3, 5).unwrap();
        let fast = compute_dependency_matrix(&model, &data).unwrap();
        let slow = brute_force(&model, &data);
        for i in 0..m {
            for j in 0..m {
                let v = fast.get(i, j);
                if j <= i {
                    assert_eq!(v, 0.0, "lower triangle at ({i},{j})");
                } else {
                    assert!((0.0..=2.0).contains(&v));
                }
                worst = worst.max((v - slow.get(i, j)).abs());
            }
        }
    }

    // zero-contribution block: all-zero output projection gives a zero row
    let mut model = ffn_only_model(4, &[4, 4, 4], 0x7000);
    model.blocks[0].ffn.as_mut().unwrap().w3 = Matrix::zeros(4, 4);
    let data = generate_calibration(0x7100, 2, 2, 4).unwrap();
    let matrix = compute_dependency_matrix(&model, &data).unwrap();
    assert!(matrix.row(0).iter().all(|&v| v == 0.0));

    assert!(worst < 1e-12, "max abs difference {worst}");
    println!("acceptance 3 dependency-oracle: PASS (max abs diff {worst:e})");
}

/// Criterion 4: greedy_select matches exhaustive lexicographic
/// (m_max, m_sum, start) minimization with overlap removal, exactly,
/// over 100 seeded matrices (m <= 10, w in 2..=4).
#[test]
fn criterion_4_greedy_oracle() {
    fn exhaustive(matrix: &DependencyMatrix, eligible: &[bool], w: usize) -> Vec<BlockRange> {
        let mut remaining: Vec<usize> = (0..matrix.m.saturating_sub(w - 1))
            .filter(|&i| eligible[i..i + w].iter().all(|&e| e))
            .collect();
        let mut picks = Vec::new();
        while !remaining.is_empty() {
            let mut best: Option<(f64, f64, usize)> = None;
            for &i in &remaining {
                let s = window_stats(matrix, i, w).unwrap();
                let key = (s.m_max, s.m_sum, i);
                if best.is_none() || key < best.unwrap() {
                    best = Some(key);
                }
            }
            let (_, _, start) = best.unwrap();
            let pick = BlockRange::new(start, start + w - 1);
            remaining.retain(|&i| i + w - 1 < pick.start || i > pick.end);
            picks.push(pick);
        }
        picks
    }

    let mut rng = SplitMix64::new(0xC4);
    for case in 0..100 {
        let m = 2 + (rng.next_u64() % 9) as usize;
        let mut matrix = DependencyMatrix::zeros(m);
        for i in 0..m {
            for j in (i + 1)..m {
                // coarse values force frequent ties
                matrix.set(i, j, (rng.next_u64() % 5) as f64 * 0.25);
            }
        }
        let eligible: Vec<bool> = (0..m).map(|_| rng.next_f64() < 0.85).collect();
        for w in 2..=4usize {
            if w > m {
                continue;
            }
            let plan = greedy_select(&matrix, &eligible, w).unwrap();
            let expect = exhaustive(&matrix, &eligible, w);
            assert_eq!(plan.ranges, expect, "case {case}, w {w}");
        }
    }
    println!("acceptance 4 greedy-oracle: PASS");
}

/// Criterion 5: analytic latency of a fused model never exceeds the
/// original's, and with stage flops exact multiples of g*w_wave the saving
/// is exactly (k-1)*t_sync per fused run of k stages.
#[test]
fn criterion_5_sync_savings() {
    let mut rng = SplitMix64::new(0xC5);
    for case in 0..50u64 {
        let m = 2 + (rng.next_u64() % 10) as usize;
        let hiddens: Vec<usize> = (0..m).map(|_| 1 + (rng.next_u64() % 24) as usize).collect();
        let model = ffn_only_model(4, &hiddens, 0x8000 + case);
        let plan = plan_ffn_fusion(&model, 64, false, ScaleMode::Literal);
        let fused = apply_fusion_plan(&model, &plan).unwrap();
        let params = LatencyParams {
            g: 1 + (rng.next_u64() % 4) as usize,
            t_sync: rng.uniform(1e-5, 1e-3),
            w_wave: rng.uniform(10.0, 1e4),
            t_tile: rng.uniform(1e-6, 1e-4),
            n: 1 + (rng.next_u64() % 8) as usize,
        };
        let a = analytic_latency(&model, &params).unwrap().total_seconds;
        let b = analytic_latency(&fused, &params).unwrap().total_seconds;
        assert!(b <= a + 1e-15, "case {case}: fused {b} > sequential {a}");
    }

    // exact-division construction: flops = 6 * n * d_e * d_h with n=1,
    // d_e=4 gives 24*d_h; g=1, w_wave=24 makes every stage an exact wave
    // multiple, so fusing k stages saves exactly (k-1)*t_sync.
    for k in 2..=6usize {
        let model = ffn_only_model(4, &vec![3; k], 0x9000 + k as u64);
        let plan = plan_ffn_fusion(&model, 1_000, false, ScaleMode::Literal);
        assert_eq!(plan.ranges.len(), 1);
        let fused = apply_fusion_plan(&model, &plan).unwrap();
        let params = LatencyParams {
            g: 1,
            t_sync: 7e-4,
            w_wave: 24.0,
            t_tile: 1e-5,
            n: 1,
        };
        let a = analytic_latency(&model, &params).unwrap().total_seconds;
        let b = analytic_latency(&fused, &params).unwrap().total_seconds;
        let saving = a - b;
        let expected = (k - 1) as f64 * params.t_sync;
        assert!(
            (saving - expected).abs() < 1e-12,
            "k {k}: saving {saving} vs {expected}"
        );
    }
    println!("acceptance 5 sync-savings: PASS");
}

/// Criterion 6: a 10-stage model vs its 1-stage fusion with 5 ms injected
/// sync cost shows a median measured saving of at least 0.8 * 9 * 5 ms,
/// with outputs bit-identical across 1, 2, and 4 workers.
#[test]
fn criterion_6_wall_clock_benefit() {
    let model = ffn_only_model(4, &[8; 10], 0xA000);
    let plan = plan_ffn_fusion(&model, 1_000, false, ScaleMode::Literal);
    let fused = apply_fusion_plan(&model, &plan).unwrap();
    assert_eq!(fused.stages.len(), 1);
    let x = random_input(2, 4, 0xA100);
    let sync = Duration::from_millis(5);

    let (reference, _) = model_forward(&model, &x, false).unwrap();
    let (fused_reference, _) = model_forward(&fused, &x, false).unwrap();

    let mut savings = Vec::new();
    for _ in 0..10 {
        let (out_a, slow) = wall_clock_bench(&model, &x, 2, sync).unwrap();
        let (out_b, fast) = wall_clock_bench(&fused, &x, 2, sync).unwrap();
        assert_eq!(out_a, reference);
        assert_eq!(out_b, fused_reference);
        savings.push(slow.total_seconds - fast.total_seconds);
    }
    savings.sort_by(f64::total_cmp);
    let median = (savings[4] + savings[5]) / 2.0;
    assert!(median >= 0.8 * 9.0 * 0.005, "median saving {median}s");

    for workers in [1, 2, 4] {
        let (out_a, _) = wall_clock_bench(&model, &x, workers, Duration::ZERO).unwrap();
        let (out_b, _) = wall_clock_bench(&fused, &x, workers, Duration::ZERO).unwrap();
        assert_eq!(out_a, reference, "workers {workers}");
        assert_eq!(out_b, fused_reference, "workers {workers}");
    }
    println!(
        "acceptance 6 wall-clock-benefit: PASS (median saving {:.1} ms)",
        median * 1e3
    );
}

/// Criterion 7: removal of a zero-projection FFN and reversal of identical
/// blocks are bit-exact no-ops; reverse-vs-fuse divergence is finite.
#[test]
fn criterion_7_ablation_semantics() {
    let x = random_input(3, 4, 0xB100);

    // zero-projection removal
    let mut model = ffn_only_model(4, &[4, 5, 6], 0xB000);
    model.blocks[1].ffn.as_mut().unwrap().w3 = Matrix::zeros(4, 5);
    let removed = remove_ffns(&model, &[1]).unwrap();
    let (a, _) = model_forward(&model, &x, false).unwrap();
    let (b, _) = model_forward(&removed, &x, false).unwrap();
    assert_eq!(a, b);

    // reversal of identical blocks
    let mut twin = ffn_only_model(4, &[5, 5], 0xB200);
    twin.blocks[1] = twin.blocks[0].clone();
    let reversed = reverse_ffn_range(&twin, BlockRange::new(0, 1)).unwrap();
    let (a, _) = model_forward(&twin, &x, false).unwrap();
    let (b, _) = model_forward(&reversed, &x, false).unwrap();
    assert_eq!(a, b);

    // reverse vs fuse on a seeded run: both finite, difference reported
    let model = ffn_only_model(4, &[4, 6, 5], 0xB300);
    let reversed = reverse_ffn_range(&model, BlockRange::new(0, 2)).unwrap();
    let plan = plan_ffn_fusion(&model, 100, false, ScaleMode::Literal);
    let fused = apply_fusion_plan(&model, &plan).unwrap();
    let (r, _) = model_forward(&reversed, &x, false).unwrap();
    let (f, _) = model_forward(&fused, &x, false).unwrap();
    let divergence = max_token_rel_diff(&r, &f);
    assert!(divergence.is_finite());
    println!("acceptance 7 ablation-semantics: PASS (reverse-vs-fuse divergence {divergence:e})");
}

/// Criterion 8: 100 seeded models survive save -> load -> save
/// byte-identically; corrupt headers and truncations are rejected.
#[test]
fn criterion_8_serialization() {
    let mut rng = SplitMix64::new(0xC8);
    for case in 0..100u64 {
        let m = 1 + (rng.next_u64() % 6) as usize;
        let specs: Vec<(bool, usize)> = (0..m)
            .map(|_| (rng.next_f64() < 0.5, (rng.next_u64() % 8) as usize))
            .collect();
        let model = seeded_model(4, 1, 2, &specs, 0xD000 + case);
        let bytes = model_to_bytes(&model).unwrap();
        let loaded = model_from_bytes(&bytes, &PathBuf::from("mem")).unwrap();
        let again = model_to_bytes(&loaded).unwrap();
        assert_eq!(bytes, again, "case {case}");
    }

    let model = seeded_model(4, 1, 2, &[(true, 4), (false, 5)], 0xD100);
    let bytes = model_to_bytes(&model).unwrap();
    let p = PathBuf::from("mem");
    let mut corrupt = bytes.clone();
    corrupt[0] = b'?';
    assert!(matches!(
        model_from_bytes(&corrupt, &p),
        Err(IoError::CorruptCheckpoint { .. })
    ));
    assert!(matches!(
        model_from_bytes(&bytes[..bytes.len() - 5], &p),
        Err(IoError::CorruptCheckpoint { .. })
    ));
    println!("acceptance 8 serialization: PASS");
}

/// Criterion 9: the gen -> plan -> fuse -> verify-fusion CLI pipeline
/// exits 0 with a reported error < 1e-9 on a 12-block model containing a
/// 6-block attention-removed run.
#[test]
fn criterion_9_cli_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    let model_path = dir.path().join("model.ckpt");
    let plan_path = dir.path().join("plan.txt");
    let fused_path = dir.path().join("fused.ckpt");

    let mut blocks = Vec::new();
    for i in 0..12 {
        let attention = !(3..9).contains(&i);
        blocks.push(format!(
            "{{\"attention\": {attention}, \"ffn_hidden\": {}}}",
            6 + i % 3
        ));
    }
    std::fs::write(
        &config_path,
        format!(
            "{{\"d_e\": 8, \"n_heads\": 2, \"head_dim\": 2, \"dtype\": \"f64\", \"blocks\": [{}]}}",
            blocks.join(",")
        ),
    )
    .unwrap();

    let bin = env!("CARGO_BIN_EXE_ffnf");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "ffnf {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };

    run(&[
        "gen",
        "--config",
        config_path.to_str().unwrap(),
        "--seed",
        "42",
        "--out",
        model_path.to_str().unwrap(),
    ]);
    run(&[
        "plan",
        "ffn",
        "--model",
        model_path.to_str().unwrap(),
        "--budget",
        "64",
        "--out",
        plan_path.to_str().unwrap(),
    ]);
    run(&[
        "fuse",
        "--model",
        model_path.to_str().unwrap(),
        "--plan",
        plan_path.to_str().unwrap(),
        "--out",
        fused_path.to_str().unwrap(),
    ]);
    let stdout = run(&[
        "verify-fusion",
        "--model",
        model_path.to_str().unwrap(),
        "--plan",
        plan_path.to_str().unwrap(),
        "--calib",
        "gen:seed=7,count=2,n=6",
    ]);
    assert!(
        stdout.contains("max fusion error"),
        "unexpected output: {stdout}"
    );
    println!("acceptance 9 cli-pipeline: PASS ({})", stdout.trim());
}
