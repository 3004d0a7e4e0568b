//! Forward-pass arithmetic: SiLU, token normalization, SwiGLU, causal
//! attention, block and model forwards.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{AttentionWeights, Block, FfnWeights, Model, NormScale};

/// Hidden channels per accumulation chunk in [`swiglu_forward`].
///
/// The down-projection sum over the hidden dimension is accumulated chunk
/// by chunk in ascending chunk order. Because the grouping is fixed (it
/// never depends on how many workers evaluate the chunks), a concurrent
/// harness that computes chunk partials on separate threads and merges
/// them in chunk order reproduces the single-threaded result bit for bit.
pub const HIDDEN_CHUNK: usize = 32;

pub fn silu(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

/// Divides each token row by its L2 norm (floored at `epsilon`) and applies
/// the per-channel gain.
pub fn token_normalize(x: &Matrix, norm: &NormScale) -> Result<Matrix> {
    if norm.scale.len() != x.cols() {
        return Err(Error::ShapeMismatch(format!(
            "norm scale length {} vs {} columns",
            norm.scale.len(),
            x.cols()
        )));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mut sq = 0.0;
        for v in row.iter() {
            sq += v * v;
        }
        let denom = libm::sqrt(sq).max(norm.epsilon);
        for (v, s) in row.iter_mut().zip(&norm.scale) {
            *v = *v / denom * *s;
        }
    }
    Ok(out)
}

/// SwiGLU partial over hidden channels [h0, h1):
/// (silu(X W2[h0..h1]^T) ⊙ X W1[h0..h1]^T) W3[:, h0..h1]^T.
///
/// Summing the partials of consecutive chunks in ascending order is exactly
/// [`swiglu_forward`].
pub fn swiglu_chunk_partial(x: &Matrix, ffn: &FfnWeights, h0: usize, h1: usize) -> Result<Matrix> {
    ffn.validate()?;
    let d_e = ffn.embed_dim();
    if x.cols() != d_e {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, ffn expects {d_e}",
            x.cols()
        )));
    }
    if h1 > ffn.hidden_dim() || h0 >= h1 {
        return Err(Error::InvalidArgument(format!(
            "chunk [{h0}, {h1}) out of range for d_h {}",
            ffn.hidden_dim()
        )));
    }
    let n = x.rows();
    let mut out = Matrix::zeros(n, d_e);
    for i in 0..n {
        let xi = x.row(i);
        for h in h0..h1 {
            let mut up = 0.0;
            let mut gate = 0.0;
            for ((v, a), b) in xi.iter().zip(ffn.w1.row(h)).zip(ffn.w2.row(h)) {
                up += v * a;
                gate += v * b;
            }
            let act = silu(gate) * up;
            let oi = out.row_mut(i);
            for (e, o) in oi.iter_mut().enumerate() {
                *o += act * ffn.w3.get(e, h);
            }
        }
    }
    Ok(out)
}

/// Hidden-chunk boundaries for a given hidden width: contiguous ranges of
/// [`HIDDEN_CHUNK`] channels, last one possibly shorter.
pub fn hidden_chunks(d_h: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..d_h)
        .step_by(HIDDEN_CHUNK)
        .map(move |h0| (h0, (h0 + HIDDEN_CHUNK).min(d_h)))
}

/// (silu(X W2^T) ⊙ X W1^T) W3^T, shape n x d_e.
pub fn swiglu_forward(x: &Matrix, ffn: &FfnWeights) -> Result<Matrix> {
    let mut out: Option<Matrix> = None;
    for (h0, h1) in hidden_chunks(ffn.hidden_dim()) {
        let partial = swiglu_chunk_partial(x, ffn, h0, h1)?;
        match &mut out {
            None => out = Some(partial),
            Some(acc) => acc.add_assign(&partial)?,
        }
    }
    out.ok_or_else(|| Error::InvalidArgument("ffn with zero hidden dim".into()))
}

/// Standard causal multi-head attention: per head, scores
/// (X Wq^T)(X Wk^T)^T / sqrt(head_dim) with strictly causal mask,
/// row-softmax, times X Wv^T; heads concatenated then projected by Wo.
pub fn attention_forward(x: &Matrix, attn: &AttentionWeights) -> Result<Matrix> {
    attn.validate(x.cols())?;
    let n = x.rows();
    let hd = attn.head_dim;
    let q = x.matmul_nt(&attn.wq)?;
    let k = x.matmul_nt(&attn.wk)?;
    let v = x.matmul_nt(&attn.wv)?;
    let inv_sqrt = 1.0 / libm::sqrt(hd as f64);

    let mut concat = Matrix::zeros(n, attn.proj_dim());
    let mut probs = Vec::with_capacity(n);
    for head in 0..attn.n_heads {
        let off = head * hd;
        for i in 0..n {
            // Scores over keys 0..=i, softmax with max subtraction.
            probs.clear();
            let qi = &q.row(i)[off..off + hd];
            let mut max_score = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k.row(j)[off..off + hd];
                let mut s = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    s += a * b;
                }
                let s = s * inv_sqrt;
                max_score = max_score.max(s);
                probs.push(s);
            }
            let mut total = 0.0;
            for p in probs.iter_mut() {
                *p = libm::exp(*p - max_score);
                total += *p;
            }
            for j in 0..=i {
                let w = probs[j] / total;
                let vj = &v.row(j)[off..off + hd];
                let oi = &mut concat.row_mut(i)[off..off + hd];
                for (o, b) in oi.iter_mut().zip(vj) {
                    *o += w * *b;
                }
            }
        }
    }
    concat.matmul_nt(&attn.wo)
}

/// One block: pre-norm attention residual (if present) followed by a
/// pre-norm FFN residual (if present). A block with neither is identity.
pub fn block_forward(x: &Matrix, block: &Block) -> Result<Matrix> {
    let g = match (&block.attn, &block.norm1) {
        (Some(attn), Some(norm1)) => {
            let a = attention_forward(&token_normalize(x, norm1)?, attn)?;
            x.add(&a)?
        }
        (None, None) => x.clone(),
        _ => return Err(Error::InvalidArgument("norm1/attention mismatch".into())),
    };
    match (&block.ffn, &block.norm2) {
        (Some(ffn), Some(norm2)) => {
            let f = swiglu_forward(&token_normalize(&g, norm2)?, ffn)?;
            g.add(&f)
        }
        (None, None) => Ok(g),
        _ => Err(Error::InvalidArgument("norm2/ffn mismatch".into())),
    }
}

/// Per-block record of a captured forward pass: the input each block saw
/// and its contribution h = f(X) - X.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub inputs: Vec<Matrix>,
    pub contributions: Vec<Matrix>,
}

/// Runs the model's stages in order. Within a stage every block sees the
/// same input and Y = X + sum of (block_forward(X, b) - X), accumulated in
/// ascending block-index order.
pub fn model_forward(
    model: &Model,
    x: &Matrix,
    capture: bool,
) -> Result<(Matrix, Option<ForwardTrace>)> {
    if x.cols() != model.config.d_e {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, model d_e is {}",
            x.cols(),
            model.config.d_e
        )));
    }
    let mut trace = capture.then(|| ForwardTrace {
        inputs: Vec::with_capacity(model.block_count()),
        contributions: Vec::with_capacity(model.block_count()),
    });
    let mut current = x.clone();
    for stage in &model.stages {
        let mut next = current.clone();
        for &idx in stage {
            let out = block_forward(&current, &model.blocks[idx])?;
            let h = out.sub(&current)?;
            next.add_assign(&h)?;
            if let Some(t) = &mut trace {
                t.inputs.push(current.clone());
                t.contributions.push(h);
            }
        }
        current = next;
    }
    Ok((current, trace))
}
