//! Wall-clock stage execution across worker threads.
//!
//! Each stage's work is cut into self-contained tasks (whole-block
//! contributions, or hidden-chunk partials when a stage is a single wide
//! attention-removed FFN). Tasks run on any worker, but the merge always
//! sums results in ascending task order and follows the same accumulation
//! grouping as `model_forward`, so the numeric output is bit-identical to
//! single-threaded execution for every worker count. A barrier ends each
//! stage; the injected synchronization cost is burned as a busy-wait per
//! barrier to emulate an all-reduce.

use std::time::{Duration, Instant};

use crate::error::Result;
use ffnf_core::latency::{analytic_latency, stage_flops, BenchReport, LatencyParams};
use ffnf_core::ops::{block_forward, hidden_chunks, swiglu_chunk_partial, token_normalize};
use ffnf_core::{Error, Matrix, Model, NORM_EPS};

fn busy_wait(duration: Duration) {
    if duration.is_zero() {
        return;
    }
    let start = Instant::now();
    while start.elapsed() < duration {
        std::hint::spin_loop();
    }
}

enum StageWork {
    /// One task per block: contribution h = f(X) - X.
    Blocks(Vec<usize>),
    /// Hidden-dimension shards of a single attention-removed FFN block:
    /// the shared normalized input plus one task per hidden chunk.
    FfnChunks {
        block: usize,
        normalized: Matrix,
        chunks: Vec<(usize, usize)>,
    },
}

fn plan_stage(model: &Model, stage: &[usize], x: &Matrix) -> Result<StageWork> {
    if let [idx] = stage {
        let block = &model.blocks[*idx];
        if block.is_ffn_only() {
            let ffn = block.ffn.as_ref().unwrap();
            let chunks: Vec<(usize, usize)> = hidden_chunks(ffn.hidden_dim()).collect();
            if chunks.len() > 1 {
                let normalized = token_normalize(x, block.norm2.as_ref().unwrap())?;
                return Ok(StageWork::FfnChunks {
                    block: *idx,
                    normalized,
                    chunks,
                });
            }
        }
    }
    Ok(StageWork::Blocks(stage.to_vec()))
}

/// Runs `task_count` tasks across `workers` threads (round-robin by task
/// index) and returns results in task order.
fn run_tasks<F>(task_count: usize, workers: usize, task: F) -> Result<Vec<Matrix>>
where
    F: Fn(usize) -> Result<Matrix> + Sync,
{
    if workers <= 1 || task_count <= 1 {
        return (0..task_count).map(&task).collect();
    }
    let mut slots: Vec<Option<Result<Matrix>>> = (0..task_count).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers.min(task_count) {
            let task = &task;
            handles.push(scope.spawn(move || {
                let mut produced = Vec::new();
                let mut i = w;
                while i < task_count {
                    produced.push((i, task(i)));
                    i += workers;
                }
                produced
            }));
        }
        for handle in handles {
            for (i, result) in handle.join().expect("worker panicked") {
                slots[i] = Some(result);
            }
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("every task ran"))
        .collect()
}

/// Executes the model stage by stage with `workers` concurrent workers and
/// returns the forward output plus measured per-stage wall-clock times.
pub fn wall_clock_bench(
    model: &Model,
    x: &Matrix,
    workers: usize,
    injected_sync_cost: Duration,
) -> Result<(Matrix, BenchReport)> {
    if workers == 0 {
        return Err(Error::InvalidArgument("workers must be >= 1".into()).into());
    }
    if x.cols() != model.config.d_e {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, model d_e is {}",
            x.cols(),
            model.config.d_e
        ))
        .into());
    }
    let n = x.rows();
    let mut stage_seconds = Vec::with_capacity(model.stages.len());
    let mut flops = Vec::with_capacity(model.stages.len());
    let mut current = x.clone();

    for stage in &model.stages {
        let started = Instant::now();
        match plan_stage(model, stage, &current)? {
            StageWork::Blocks(indices) => {
                let input = &current;
                let contributions = run_tasks(indices.len(), workers, |t| {
                    let out = block_forward(input, &model.blocks[indices[t]])?;
                    Ok(out.sub(input)?)
                })?;
                let mut next = current.clone();
                for h in &contributions {
                    next.add_assign(h)?;
                }
                current = next;
            }
            StageWork::FfnChunks {
                block,
                normalized,
                chunks,
            } => {
                let ffn = model.blocks[block].ffn.as_ref().unwrap();
                let partials = run_tasks(chunks.len(), workers, |t| {
                    let (h0, h1) = chunks[t];
                    Ok(swiglu_chunk_partial(&normalized, ffn, h0, h1)?)
                })?;
                // Same grouping as swiglu_forward: first partial is the
                // accumulator, later ones added in chunk order.
                let mut iter = partials.into_iter();
                let mut ffn_out = iter.next().expect("at least one chunk");
                for p in iter {
                    ffn_out.add_assign(&p)?;
                }
                let out = current.add(&ffn_out)?;
                let h = out.sub(&current)?;
                let mut next = current.clone();
                next.add_assign(&h)?;
                current = next;
            }
        }
        busy_wait(injected_sync_cost);
        stage_seconds.push(started.elapsed().as_secs_f64());
        flops.push(stage_flops(model, stage, n)?);
    }

    Ok((current, BenchReport::from_stages(stage_seconds, flops, n)))
}

/// Side-by-side analytic and measured reports for two models, plus the max
/// per-token relative difference of their outputs on the same input.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub analytic_a: BenchReport,
    pub analytic_b: BenchReport,
    pub wall_a: BenchReport,
    pub wall_b: BenchReport,
    pub max_divergence: f64,
}

pub fn compare_models(
    a: &Model,
    b: &Model,
    x: &Matrix,
    params: &LatencyParams,
    workers: usize,
    injected_sync_cost: Duration,
) -> Result<ComparisonReport> {
    if a.config.d_e != b.config.d_e {
        return Err(Error::InvalidArgument(format!(
            "models have d_e {} and {}",
            a.config.d_e, b.config.d_e
        ))
        .into());
    }
    let analytic_a = analytic_latency(a, params)?;
    let analytic_b = analytic_latency(b, params)?;
    let (out_a, wall_a) = wall_clock_bench(a, x, workers, injected_sync_cost)?;
    let (out_b, wall_b) = wall_clock_bench(b, x, workers, injected_sync_cost)?;

    let mut max_divergence = 0.0f64;
    for t in 0..out_a.rows() {
        let norm = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = out_a
            .row(t)
            .iter()
            .zip(out_b.row(t))
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        max_divergence = max_divergence.max(diff / norm(out_a.row(t)).max(NORM_EPS));
    }

    Ok(ComparisonReport {
        analytic_a,
        analytic_b,
        wall_a,
        wall_b,
        max_divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ffnf_core::fusion::{apply_fusion_plan, plan_ffn_fusion, remove_ffns, ScaleMode};
    use ffnf_core::model::seeded_model;
    use ffnf_core::ops::model_forward;
    use ffnf_core::rng::SplitMix64;

    fn input(n: usize, d_e: usize, seed: u64) -> Matrix {
        let mut rng = SplitMix64::new(seed);
        Matrix::from_vec(n, d_e, (0..n * d_e).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn output_is_bit_identical_across_worker_counts() {
        // includes a wide fused-style FFN (d_h 80 spans chunks) and a
        // multi-block parallel stage
        let mut m = seeded_model(
            6,
            2,
            2,
            &[(true, 8), (false, 80), (true, 6), (true, 5)],
            311,
        );
        m.stages = vec![vec![0], vec![1], vec![2, 3]];
        let x = input(4, 6, 7);
        let (reference, _) = model_forward(&m, &x, false).unwrap();
        for workers in [1, 2, 4] {
            let (got, report) = wall_clock_bench(&m, &x, workers, Duration::ZERO).unwrap();
            assert_eq!(got, reference, "workers = {workers}");
            assert_eq!(report.stage_count, 3);
        }
    }

    #[test]
    fn fewer_stages_cost_fewer_barriers() {
        let m = seeded_model(4, 0, 0, &[(false, 8); 10], 313);
        let plan = plan_ffn_fusion(&m, 1_000, false, ScaleMode::Literal);
        let fused = apply_fusion_plan(&m, &plan).unwrap();
        assert_eq!(fused.block_count(), 1);
        let x = input(2, 4, 9);
        let sync = Duration::from_millis(5);
        let (_, slow) = wall_clock_bench(&m, &x, 2, sync).unwrap();
        let (_, fast) = wall_clock_bench(&fused, &x, 2, sync).unwrap();
        let saving = slow.total_seconds - fast.total_seconds;
        assert!(saving >= 0.8 * 9.0 * 0.005, "saving was {saving}");
    }

    #[test]
    fn compare_models_reports_divergence() {
        let m = seeded_model(4, 1, 2, &[(true, 6), (false, 5), (false, 4)], 317);
        let x = input(3, 4, 11);
        let p = LatencyParams::default();
        let same = compare_models(&m, &m, &x, &p, 2, Duration::ZERO).unwrap();
        assert_eq!(same.max_divergence, 0.0);
        assert_eq!(same.analytic_a, same.analytic_b);

        let removed = remove_ffns(&m, &[1]).unwrap();
        let diff = compare_models(&m, &removed, &x, &p, 2, Duration::ZERO).unwrap();
        assert!(diff.max_divergence > 0.0);
        assert!(diff.analytic_b.total_seconds < diff.analytic_a.total_seconds);
    }

    #[test]
    fn d_e_mismatch_rejected() {
        let a = seeded_model(4, 0, 0, &[(false, 4)], 1);
        let b = seeded_model(6, 0, 0, &[(false, 4)], 1);
        let x = input(2, 4, 3);
        assert!(compare_models(&a, &b, &x, &LatencyParams::default(), 1, Duration::ZERO).is_err());
    }
}
