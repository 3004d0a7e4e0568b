//! FFN fusion: sum-form parallel evaluation of consecutive attention-removed
//! blocks, exact weight-concatenation fusion of their SwiGLU layers, plan
//! construction under a width budget, and the ablation transforms
//! (removal, reversal, last-FFN exclusion).

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Block, FfnWeights, Model, NormScale};
use crate::ops::{block_forward, swiglu_forward, token_normalize};

/// How per-layer norm scales are handled when several FFNs share one input.
///
/// `Literal` applies the last layer's scale to every term, the behavioral
/// choice of the sum-form definition. `Folded` absorbs each layer's own
/// scale into its weights so the fused layer reproduces every constituent
/// under its original scale exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    #[default]
    Literal,
    Folded,
}

impl ScaleMode {
    pub fn name(self) -> &'static str {
        match self {
            ScaleMode::Literal => "literal",
            ScaleMode::Folded => "folded",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(ScaleMode::Literal),
            "folded" => Ok(ScaleMode::Folded),
            _ => Err(Error::InvalidArgument(format!("unknown scale mode {s:?}"))),
        }
    }
}

/// Inclusive block-index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRange {
    pub start: usize,
    pub end: usize,
}

impl BlockRange {
    pub fn new(start: usize, end: usize) -> Self {
        BlockRange { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn overlaps(&self, other: &BlockRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }
}

/// Contiguous block ranges designated for fusion, plus the options the plan
/// was built with.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionPlan {
    pub ranges: Vec<BlockRange>,
    pub exclude_last: bool,
    pub scale_mode: ScaleMode,
}

impl FusionPlan {
    pub fn empty() -> Self {
        FusionPlan {
            ranges: Vec::new(),
            exclude_last: false,
            scale_mode: ScaleMode::Literal,
        }
    }

    /// Ranges must be ascending, non-overlapping, length >= 2, and every
    /// covered block must be attention-removed with an FFN.
    pub fn validate(&self, model: &Model) -> Result<()> {
        let mut prev_end: Option<usize> = None;
        for r in &self.ranges {
            if r.is_empty() || r.len() < 2 {
                return Err(Error::InvalidPlan(format!(
                    "range [{}, {}] shorter than 2 blocks",
                    r.start, r.end
                )));
            }
            if let Some(pe) = prev_end {
                if r.start <= pe {
                    return Err(Error::InvalidPlan(format!(
                        "range [{}, {}] overlaps or is out of order",
                        r.start, r.end
                    )));
                }
            }
            if r.end >= model.block_count() {
                return Err(Error::InvalidPlan(format!(
                    "range [{}, {}] exceeds block count {}",
                    r.start,
                    r.end,
                    model.block_count()
                )));
            }
            for idx in r.indices() {
                if !model.blocks[idx].is_ffn_only() {
                    return Err(Error::InvalidPlan(format!(
                        "block {idx} is not an attention-removed FFN block"
                    )));
                }
            }
            prev_end = Some(r.end);
        }
        Ok(())
    }
}

fn require_ffn_only<'a>(blocks: &'a [&'a Block]) -> Result<()> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("empty block list".into()));
    }
    for (i, b) in blocks.iter().enumerate() {
        if b.has_attention() {
            return Err(Error::InvalidArgument(format!(
                "block {i} still has attention"
            )));
        }
        if !b.has_ffn() {
            return Err(Error::InvalidArgument(format!("block {i} has no FFN")));
        }
    }
    Ok(())
}

/// Sum-form parallel evaluation of a run of attention-removed blocks:
/// X + sum of FFN_j applied to a shared normalized input.
///
/// In literal mode the last block's norm is applied once and shared by all
/// terms. In folded mode each FFN sees the input normalized with its own
/// scale.
pub fn parallel_ffn_forward(x: &Matrix, blocks: &[&Block], mode: ScaleMode) -> Result<Matrix> {
    require_ffn_only(blocks)?;
    let mut out = x.clone();
    match mode {
        ScaleMode::Literal => {
            let last_norm = blocks.last().unwrap().norm2.as_ref().unwrap();
            let shared = token_normalize(x, last_norm)?;
            for b in blocks {
                let term = swiglu_forward(&shared, b.ffn.as_ref().unwrap())?;
                out.add_assign(&term)?;
            }
        }
        ScaleMode::Folded => {
            for b in blocks {
                let own = token_normalize(x, b.norm2.as_ref().unwrap())?;
                let term = swiglu_forward(&own, b.ffn.as_ref().unwrap())?;
                out.add_assign(&term)?;
            }
        }
    }
    Ok(out)
}

/// Concatenates a list of SwiGLU layers into one wide layer: W1* and W2*
/// stack the constituents' rows, W3* stacks their columns, so the fused
/// forward equals the sum of the constituent forwards on a shared input.
///
/// `scales`, when given, enables folded mode: constituent j's W1 and W2 are
/// right-multiplied by diag(s_j) diag(s_target)^-1 so the fused layer under
/// the target scale reproduces each FFN under its own scale.
pub fn fuse_ffn_weights(
    ffns: &[&FfnWeights],
    scales: Option<(&[&NormScale], &NormScale)>,
) -> Result<FfnWeights> {
    if ffns.is_empty() {
        return Err(Error::InvalidArgument("empty FFN list".into()));
    }
    let d_e = ffns[0].embed_dim();
    for (i, f) in ffns.iter().enumerate() {
        f.validate()?;
        if f.embed_dim() != d_e {
            return Err(Error::ShapeMismatch(format!(
                "ffn {i} has d_e {}, expected {d_e}",
                f.embed_dim()
            )));
        }
    }
    if let Some((own, _)) = scales {
        if own.len() != ffns.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scales for {} ffns",
                own.len(),
                ffns.len()
            )));
        }
    }

    let total_hidden: usize = ffns.iter().map(|f| f.hidden_dim()).sum();
    let mut w1 = Vec::with_capacity(total_hidden * d_e);
    let mut w2 = Vec::with_capacity(total_hidden * d_e);
    let mut w3 = Matrix::zeros(d_e, total_hidden);

    // Column ratios s_j / s_target per constituent, identity when literal.
    let mut col_offset = 0;
    for (j, f) in ffns.iter().enumerate() {
        let ratio: Option<Vec<f64>> = match scales {
            None => None,
            Some((own, target)) => {
                let mut r = Vec::with_capacity(d_e);
                for (e, (&sj, &st)) in own[j].scale.iter().zip(&target.scale).enumerate() {
                    if sj == st {
                        r.push(1.0);
                    } else if st == 0.0 {
                        return Err(Error::DegenerateScale(format!(
                            "target scale channel {e} is zero but constituent {j} needs it"
                        )));
                    } else {
                        r.push(sj / st);
                    }
                }
                Some(r)
            }
        };
        for h in 0..f.hidden_dim() {
            match &ratio {
                None => {
                    w1.extend_from_slice(f.w1.row(h));
                    w2.extend_from_slice(f.w2.row(h));
                }
                Some(r) => {
                    w1.extend(f.w1.row(h).iter().zip(r).map(|(v, q)| v * q));
                    w2.extend(f.w2.row(h).iter().zip(r).map(|(v, q)| v * q));
                }
            }
        }
        for e in 0..d_e {
            for h in 0..f.hidden_dim() {
                w3.set(e, col_offset + h, f.w3.get(e, h));
            }
        }
        col_offset += f.hidden_dim();
    }

    Ok(FfnWeights {
        w1: Matrix::from_vec(total_hidden, d_e, w1)?,
        w2: Matrix::from_vec(total_hidden, d_e, w2)?,
        w3,
    })
}

/// Builds a fusion plan: maximal runs of consecutive attention-removed FFN
/// blocks, optionally trimmed of their final block, greedily split
/// left-to-right so each range's total hidden width stays within
/// `max_fused_hidden`. Length-1 ranges are dropped.
pub fn plan_ffn_fusion(
    model: &Model,
    max_fused_hidden: usize,
    exclude_last: bool,
    scale_mode: ScaleMode,
) -> FusionPlan {
    let mut ranges = Vec::new();
    let m = model.block_count();
    let mut i = 0;
    while i < m {
        if !model.blocks[i].is_ffn_only() {
            i += 1;
            continue;
        }
        let mut end = i;
        while end + 1 < m && model.blocks[end + 1].is_ffn_only() {
            end += 1;
        }
        let run_end = if exclude_last {
            if end == i {
                i = end + 1;
                continue;
            }
            end - 1
        } else {
            end
        };
        // Greedy split of [i, run_end] under the hidden-width budget.
        let mut start = i;
        let mut width = 0usize;
        for idx in i..=run_end {
            let d_h = model.blocks[idx].ffn.as_ref().unwrap().hidden_dim();
            if idx > start && width + d_h > max_fused_hidden {
                if idx - start >= 2 {
                    ranges.push(BlockRange::new(start, idx - 1));
                }
                start = idx;
                width = d_h;
            } else {
                width += d_h;
            }
        }
        if run_end + 1 - start >= 2 {
            ranges.push(BlockRange::new(start, run_end));
        }
        i = end + 1;
    }
    FusionPlan {
        ranges,
        exclude_last,
        scale_mode,
    }
}

/// Replaces each planned range with a single attention-removed block whose
/// FFN is the concatenation of the range's FFNs and whose norm is the last
/// block's norm. Stages are rebuilt as singletons.
pub fn apply_fusion_plan(model: &Model, plan: &FusionPlan) -> Result<Model> {
    plan.validate(model)?;
    let mut blocks: Vec<Block> = Vec::new();
    let mut next_range = 0;
    let mut idx = 0;
    while idx < model.block_count() {
        if next_range < plan.ranges.len() && plan.ranges[next_range].start == idx {
            let r = &plan.ranges[next_range];
            let members: Vec<&Block> = r.indices().map(|i| &model.blocks[i]).collect();
            let ffns: Vec<&FfnWeights> = members.iter().map(|b| b.ffn.as_ref().unwrap()).collect();
            let last_norm = members.last().unwrap().norm2.as_ref().unwrap();
            let fused = match plan.scale_mode {
                ScaleMode::Literal => fuse_ffn_weights(&ffns, None)?,
                ScaleMode::Folded => {
                    let own: Vec<&NormScale> = members
                        .iter()
                        .map(|b| b.norm2.as_ref().unwrap())
                        .collect();
                    fuse_ffn_weights(&ffns, Some((&own, last_norm)))?
                }
            };
            blocks.push(Block {
                norm1: None,
                attn: None,
                norm2: Some(last_norm.clone()),
                ffn: Some(fused),
            });
            idx = r.end + 1;
            next_range += 1;
        } else {
            blocks.push(model.blocks[idx].clone());
            idx += 1;
        }
    }
    let mut out = Model {
        config: model.config.clone(),
        stages: Model::singleton_stages(blocks.len()),
        blocks,
    };
    out.resync_config();
    out.validate()?;
    Ok(out)
}

/// Deletes the FFN (and its norm) at each index. Blocks left with neither
/// component become identity blocks; indices stay stable.
pub fn remove_ffns(model: &Model, indices: &[usize]) -> Result<Model> {
    let mut out = model.clone();
    for &idx in indices {
        let block = out
            .blocks
            .get_mut(idx)
            .ok_or_else(|| Error::InvalidArgument(format!("block index {idx} out of range")))?;
        if block.ffn.is_none() {
            return Err(Error::InvalidArgument(format!("block {idx} has no FFN")));
        }
        block.ffn = None;
        block.norm2 = None;
    }
    out.resync_config();
    Ok(out)
}

/// Reverses the order of the blocks inside an inclusive range. Every block
/// in the range must be an attention-removed FFN block.
pub fn reverse_ffn_range(model: &Model, range: BlockRange) -> Result<Model> {
    if range.end >= model.block_count() || range.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "range [{}, {}] out of bounds",
            range.start, range.end
        )));
    }
    for idx in range.indices() {
        if !model.blocks[idx].is_ffn_only() {
            return Err(Error::InvalidArgument(format!(
                "block {idx} is not an attention-removed FFN block"
            )));
        }
    }
    let mut out = model.clone();
    out.blocks[range.start..=range.end].reverse();
    out.resync_config();
    Ok(out)
}

/// Evaluates the model like `model_forward` but with the given ranges
/// computed via [`parallel_ffn_forward`] instead of sequentially. This is
/// the independent reference the fusion equivalence tests compare against.
pub fn forward_with_parallel_ranges(
    model: &Model,
    x: &Matrix,
    ranges: &[BlockRange],
    mode: ScaleMode,
) -> Result<Matrix> {
    let mut current = x.clone();
    let mut next_range = 0;
    let mut idx = 0;
    while idx < model.block_count() {
        if next_range < ranges.len() && ranges[next_range].start == idx {
            let r = &ranges[next_range];
            let members: Vec<&Block> = r.indices().map(|i| &model.blocks[i]).collect();
            current = parallel_ffn_forward(&current, &members, mode)?;
            idx = r.end + 1;
            next_range += 1;
        } else {
            let out = block_forward(&current, &model.blocks[idx])?;
            let h = out.sub(&current)?;
            current.add_assign(&h)?;
            idx += 1;
        }
    }
    Ok(current)
}
