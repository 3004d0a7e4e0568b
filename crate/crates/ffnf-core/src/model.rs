//! Model structure: per-block weights, configuration, and deterministic
//! random generation.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::SplitMix64;

/// Default epsilon guarding zero-norm tokens in normalization.
pub const DEFAULT_NORM_EPS: f64 = 1e-12;

/// Storage width used when a model is serialized. In-memory arithmetic is
/// always f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(Error::InvalidArgument(format!("unknown dtype {s:?}"))),
        }
    }
}

/// Per-channel gain applied after dividing a token by its L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormScale {
    pub scale: Vec<f64>,
    pub epsilon: f64,
}

impl NormScale {
    pub fn ones(d_e: usize) -> Self {
        NormScale {
            scale: alloc::vec![1.0; d_e],
            epsilon: DEFAULT_NORM_EPS,
        }
    }
}

/// Weights of one SwiGLU FFN: `w1` (up) and `w2` (gate) are `d_h x d_e`,
/// `w3` (down) is `d_e x d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Matrix,
}

impl FfnWeights {
    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_h, d_e) = (self.w1.rows(), self.w1.cols());
        if d_h == 0 || d_e == 0 {
            return Err(Error::ShapeMismatch("empty FFN weight".into()));
        }
        if self.w2.rows() != d_h || self.w2.cols() != d_e {
            return Err(Error::ShapeMismatch(format!(
                "w2 is {}x{}, want {d_h}x{d_e}",
                self.w2.rows(),
                self.w2.cols()
            )));
        }
        if self.w3.rows() != d_e || self.w3.cols() != d_h {
            return Err(Error::ShapeMismatch(format!(
                "w3 is {}x{}, want {d_e}x{d_h}",
                self.w3.rows(),
                self.w3.cols()
            )));
        }
        Ok(())
    }
}

/// Causal multi-head attention projections. `wq`, `wk`, `wv` are
/// `(n_heads * head_dim) x d_e`; `wo` is `d_e x (n_heads * head_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl AttentionWeights {
    pub fn proj_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self, d_e: usize) -> Result<()> {
        let p = self.proj_dim();
        if p == 0 {
            return Err(Error::ShapeMismatch("zero attention projection dim".into()));
        }
        for (name, m) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if m.rows() != p || m.cols() != d_e {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {}x{}, want {p}x{d_e}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if self.wo.rows() != d_e || self.wo.cols() != p {
            return Err(Error::ShapeMismatch(format!(
                "wo is {}x{}, want {d_e}x{p}",
                self.wo.rows(),
                self.wo.cols()
            )));
        }
        Ok(())
    }
}

/// One transformer block. Either component may be absent; a block with
/// neither is the identity map. A norm is present exactly when its paired
/// component is.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Block {
    pub norm1: Option<NormScale>,
    pub attn: Option<AttentionWeights>,
    pub norm2: Option<NormScale>,
    pub ffn: Option<FfnWeights>,
}

impl Block {
    pub fn identity() -> Self {
        Block::default()
    }

    pub fn has_attention(&self) -> bool {
        self.attn.is_some()
    }

    pub fn has_ffn(&self) -> bool {
        self.ffn.is_some()
    }

    /// Attention-removed block that still carries an FFN: the fusion substrate.
    pub fn is_ffn_only(&self) -> bool {
        self.attn.is_none() && self.ffn.is_some()
    }

    pub fn validate(&self, d_e: usize) -> Result<()> {
        if self.attn.is_some() != self.norm1.is_some() {
            return Err(Error::InvalidArgument(
                "norm1 present iff attention present".into(),
            ));
        }
        if self.ffn.is_some() != self.norm2.is_some() {
            return Err(Error::InvalidArgument(
                "norm2 present iff ffn present".into(),
            ));
        }
        if let Some(n) = &self.norm1 {
            check_scale(n, d_e, "norm1")?;
        }
        if let Some(n) = &self.norm2 {
            check_scale(n, d_e, "norm2")?;
        }
        if let Some(a) = &self.attn {
            a.validate(d_e)?;
        }
        if let Some(f) = &self.ffn {
            f.validate()?;
            if f.embed_dim() != d_e {
                return Err(Error::ShapeMismatch(format!(
                    "ffn d_e {} vs model d_e {d_e}",
                    f.embed_dim()
                )));
            }
        }
        Ok(())
    }
}

fn check_scale(n: &NormScale, d_e: usize, name: &str) -> Result<()> {
    if n.scale.len() != d_e {
        return Err(Error::ShapeMismatch(format!(
            "{name} scale length {} vs d_e {d_e}",
            n.scale.len()
        )));
    }
    if !(n.epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("{name} epsilon must be > 0")));
    }
    Ok(())
}

/// Declarative shape of one block: attention on/off and FFN hidden width
/// (0 means no FFN).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub has_attention: bool,
    pub ffn_hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_e: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub block_specs: Vec<BlockSpec>,
    pub dtype: Dtype,
}

impl ModelConfig {
    pub fn block_count(&self) -> usize {
        self.block_specs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 {
            return Err(Error::InvalidArgument("d_e must be >= 1".into()));
        }
        if self
            .block_specs
            .iter()
            .any(|s| s.has_attention && (self.n_heads == 0 || self.head_dim == 0))
        {
            return Err(Error::InvalidArgument(
                "attention blocks need n_heads and head_dim >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A model: blocks plus a stage execution plan. Each stage is a run of
/// consecutive block indices executed in parallel on a shared input with
/// summed contributions; the default plan is one block per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    pub stages: Vec<Vec<usize>>,
}

impl Model {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn singleton_stages(m: usize) -> Vec<Vec<usize>> {
        (0..m).map(|i| alloc::vec![i]).collect()
    }

    pub fn has_singleton_stages(&self) -> bool {
        self.stages.iter().all(|s| s.len() == 1)
    }

    /// Checks block/config agreement and the stage partition invariants:
    /// disjoint, covering, contiguous, ascending.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.block_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} blocks vs {} specs",
                self.blocks.len(),
                self.config.block_count()
            )));
        }
        for (i, (block, spec)) in self.blocks.iter().zip(&self.config.block_specs).enumerate() {
            block.validate(self.config.d_e)?;
            if block.has_attention() != spec.has_attention {
                return Err(Error::InvalidArgument(format!(
                    "block {i} attention presence disagrees with config"
                )));
            }
            let hidden = block.ffn.as_ref().map_or(0, FfnWeights::hidden_dim);
            if hidden != spec.ffn_hidden {
                return Err(Error::ShapeMismatch(format!(
                    "block {i} ffn_hidden {hidden} vs config {}",
                    spec.ffn_hidden
                )));
            }
        }
        self.validate_stages()
    }

    fn validate_stages(&self) -> Result<()> {
        let m = self.blocks.len();
        let mut next = 0usize;
        for stage in &self.stages {
            if stage.is_empty() {
                return Err(Error::InvalidArgument("empty stage".into()));
            }
            for &idx in stage {
                if idx != next {
                    return Err(Error::InvalidArgument(format!(
                        "stages must cover 0..{m} contiguously; got index {idx}, expected {next}"
                    )));
                }
                next += 1;
            }
        }
        if next != m {
            return Err(Error::InvalidArgument(format!(
                "stages cover {next} blocks, model has {m}"
            )));
        }
        Ok(())
    }

    /// Rebuilds the derived parts of the config (block specs) from the
    /// actual blocks. Used by transforms that edit block structure.
    pub fn resync_config(&mut self) {
        self.config.block_specs = self
            .blocks
            .iter()
            .map(|b| BlockSpec {
                has_attention: b.has_attention(),
                ffn_hidden: b.ffn.as_ref().map_or(0, FfnWeights::hidden_dim),
            })
            .collect();
    }
}

/// Fills every weight of a model deterministically from (config, seed).
///
/// Weights are uniform in [-0.5, 0.5) scaled by 1/sqrt(d_e); norm scales
/// are uniform in [0.5, 1.5). Tensors are drawn in serialization order:
/// per block ascending, norm1.s, Wq, Wk, Wv, Wo, then norm2.s, W1, W2, W3,
/// each row-major.
pub fn generate_random_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let d_e = config.d_e;
    let w_scale = 1.0 / libm::sqrt(d_e as f64);
    let proj = config.n_heads * config.head_dim;

    let fill = |rows: usize, cols: usize, rng: &mut SplitMix64| {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.uniform(-0.5, 0.5) * w_scale)
            .collect();
        Matrix::from_vec(rows, cols, data).expect("sized by construction")
    };
    let scale = |rng: &mut SplitMix64| NormScale {
        scale: (0..d_e).map(|_| rng.uniform(0.5, 1.5)).collect(),
        epsilon: DEFAULT_NORM_EPS,
    };

    let mut blocks = Vec::with_capacity(config.block_count());
    for spec in &config.block_specs {
        let mut block = Block::identity();
        if spec.has_attention {
            block.norm1 = Some(scale(&mut rng));
            block.attn = Some(AttentionWeights {
                wq: fill(proj, d_e, &mut rng),
                wk: fill(proj, d_e, &mut rng),
                wv: fill(proj, d_e, &mut rng),
                wo: fill(d_e, proj, &mut rng),
                n_heads: config.n_heads,
                head_dim: config.head_dim,
            });
        }
        if spec.ffn_hidden > 0 {
            block.norm2 = Some(scale(&mut rng));
            block.ffn = Some(FfnWeights {
                w1: fill(spec.ffn_hidden, d_e, &mut rng),
                w2: fill(spec.ffn_hidden, d_e, &mut rng),
                w3: fill(d_e, spec.ffn_hidden, &mut rng),
            });
        }
        blocks.push(block);
    }

    let stages = Model::singleton_stages(blocks.len());
    let model = Model {
        config: config.clone(),
        blocks,
        stages,
    };
    model.validate()?;
    Ok(model)
}

/// Convenience constructor used throughout the tests: `specs` is
/// (has_attention, ffn_hidden) per block.
pub fn seeded_model(
    d_e: usize,
    n_heads: usize,
    head_dim: usize,
    specs: &[(bool, usize)],
    seed: u64,
) -> Model {
    let config = ModelConfig {
        d_e,
        n_heads,
        head_dim,
        block_specs: specs
            .iter()
            .map(|&(has_attention, ffn_hidden)| BlockSpec {
                has_attention,
                ffn_hidden,
            })
            .collect(),
        dtype: Dtype::F64,
    };
    generate_random_model(&config, seed).expect("valid test config")
}
