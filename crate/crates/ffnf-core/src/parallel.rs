//! Full-block parallelization: window statistics over the dependency
//! matrix, the greedy window selector, and stage-plan application.

use alloc::format;
use alloc::vec::Vec;

use crate::dependency::DependencyMatrix;
use crate::error::{Error, Result};
use crate::fusion::BlockRange;
use crate::model::Model;

/// Max and sum of a w x w dependency submatrix starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub start: usize,
    pub width: usize,
    pub m_max: f64,
    pub m_sum: f64,
}

/// Disjoint block ranges selected for parallel execution, in selection
/// order, plus the window width they were selected with.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelPlan {
    pub ranges: Vec<BlockRange>,
    pub width: usize,
}

impl ParallelPlan {
    pub fn empty(width: usize) -> Self {
        ParallelPlan {
            ranges: Vec::new(),
            width,
        }
    }
}

/// Statistics over the submatrix M[i..i+w)[i..i+w).
pub fn window_stats(m: &DependencyMatrix, i: usize, w: usize) -> Result<WindowStats> {
    if w == 0 || i + w > m.m {
        return Err(Error::InvalidArgument(format!(
            "window [{i}, {}) out of range for m = {}",
            i + w,
            m.m
        )));
    }
    let mut m_max = 0.0f64;
    let mut m_sum = 0.0f64;
    for r in i..i + w {
        for c in i..i + w {
            let v = m.get(r, c);
            m_max = m_max.max(v);
            m_sum += v;
        }
    }
    Ok(WindowStats {
        start: i,
        width: w,
        m_max,
        m_sum,
    })
}

/// Greedy window selection: among all fully-eligible windows of width `w`,
/// repeatedly pick the lexicographic minimum of (m_max, m_sum, start),
/// drop every window overlapping the pick, and stop when none remain.
pub fn greedy_select(m: &DependencyMatrix, eligible: &[bool], w: usize) -> Result<ParallelPlan> {
    if w == 0 {
        return Err(Error::InvalidArgument("window width must be >= 1".into()));
    }
    if eligible.len() != m.m {
        return Err(Error::InvalidArgument(format!(
            "eligibility vector length {} vs m = {}",
            eligible.len(),
            m.m
        )));
    }
    let mut candidates: Vec<WindowStats> = Vec::new();
    if w <= m.m {
        for i in 0..=m.m - w {
            if eligible[i..i + w].iter().all(|&e| e) {
                candidates.push(window_stats(m, i, w)?);
            }
        }
    }
    let mut plan = ParallelPlan::empty(w);
    while !candidates.is_empty() {
        let best = candidates
            .iter()
            .copied()
            .min_by(|a, b| {
                (a.m_max, a.m_sum, a.start)
                    .partial_cmp(&(b.m_max, b.m_sum, b.start))
                    .expect("dependency entries are finite")
            })
            .unwrap();
        let picked = BlockRange::new(best.start, best.start + w - 1);
        candidates.retain(|c| {
            let r = BlockRange::new(c.start, c.start + w - 1);
            !r.overlaps(&picked)
        });
        plan.ranges.push(picked);
    }
    Ok(plan)
}

/// Rebuilds the model's stage list so each plan range forms one multi-block
/// stage; all other blocks stay singleton stages. Weights are untouched.
pub fn apply_block_parallel_plan(model: &Model, plan: &ParallelPlan) -> Result<Model> {
    let m = model.block_count();
    let mut sorted = plan.ranges.clone();
    sorted.sort_by_key(|r| r.start);
    for (k, r) in sorted.iter().enumerate() {
        if r.is_empty() || r.end >= m {
            return Err(Error::InvalidPlan(format!(
                "range [{}, {}] out of bounds for {m} blocks",
                r.start, r.end
            )));
        }
        if k > 0 && sorted[k - 1].end >= r.start {
            return Err(Error::InvalidPlan(format!(
                "range [{}, {}] overlaps its predecessor",
                r.start, r.end
            )));
        }
    }
    let mut out = model.clone();
    out.stages = Vec::new();
    let mut idx = 0;
    let mut next = 0;
    while idx < m {
        if next < sorted.len() && sorted[next].start == idx {
            out.stages.push(sorted[next].indices().collect());
            idx = sorted[next].end + 1;
            next += 1;
        } else {
            out.stages.push(alloc::vec![idx]);
            idx += 1;
        }
    }
    out.validate()?;
    Ok(out)
}
