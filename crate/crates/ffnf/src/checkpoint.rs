//! Bit-exact binary checkpoint format.
//!
//! Layout: magic `FFNF`, u32 LE version (1), u64 LE config length, a UTF-8
//! JSON config document, then the tensor region: for each block ascending,
//! norm1.s, Wq, Wk, Wv, Wo when attention is present, then norm2.s, W1,
//! W2, W3 when the FFN is present, each row-major little-endian IEEE-754
//! in the declared dtype. The declared tensor byte length must equal the
//! remaining file length exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};
use ffnf_core::model::DEFAULT_NORM_EPS;
use ffnf_core::{
    AttentionWeights, Block, BlockSpec, Dtype, FfnWeights, Matrix, Model, ModelConfig, NormScale,
};

pub const MAGIC: &[u8; 4] = b"FFNF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDoc {
    pub attention: bool,
    pub ffn_hidden: usize,
}

/// The JSON config document stored in the header. Also the format of the
/// model description files the CLI `gen` subcommand consumes (`version`
/// and `stages` may be omitted there).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigDoc {
    #[serde(default = "default_version")]
    pub version: u32,
    pub d_e: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub dtype: String,
    pub blocks: Vec<BlockDoc>,
    #[serde(default)]
    pub stages: Vec<Vec<usize>>,
}

fn default_version() -> u32 {
    VERSION
}

impl ConfigDoc {
    pub fn from_model(model: &Model) -> Self {
        ConfigDoc {
            version: VERSION,
            d_e: model.config.d_e,
            n_heads: model.config.n_heads,
            head_dim: model.config.head_dim,
            dtype: model.config.dtype.name().to_string(),
            blocks: model
                .config
                .block_specs
                .iter()
                .map(|s| BlockDoc {
                    attention: s.has_attention,
                    ffn_hidden: s.ffn_hidden,
                })
                .collect(),
            stages: model.stages.clone(),
        }
    }

    pub fn to_model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            d_e: self.d_e,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            block_specs: self
                .blocks
                .iter()
                .map(|b| BlockSpec {
                    has_attention: b.attention,
                    ffn_hidden: b.ffn_hidden,
                })
                .collect(),
            dtype: Dtype::parse(&self.dtype)?,
        })
    }

    /// Stage plan, defaulting to singletons when the document omits it.
    pub fn stages_or_default(&self) -> Vec<Vec<usize>> {
        if self.stages.is_empty() {
            Model::singleton_stages(self.blocks.len())
        } else {
            self.stages.clone()
        }
    }
}

/// Tensor element count for one model, in serialization order.
fn tensor_len(config: &ModelConfig) -> usize {
    let d_e = config.d_e;
    let p = config.n_heads * config.head_dim;
    config
        .block_specs
        .iter()
        .map(|s| {
            let mut n = 0;
            if s.has_attention {
                n += d_e + 3 * p * d_e + d_e * p;
            }
            if s.ffn_hidden > 0 {
                n += d_e + 2 * s.ffn_hidden * d_e + d_e * s.ffn_hidden;
            }
            n
        })
        .sum()
}

fn write_values(out: &mut Vec<u8>, values: &[f64], dtype: Dtype) {
    match dtype {
        Dtype::F64 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for v in values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    dtype: Dtype,
}

impl<'a> Reader<'a> {
    fn take(&mut self, count: usize) -> Vec<f64> {
        let width = self.dtype.byte_width();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let chunk = &self.bytes[self.pos..self.pos + width];
            let v = match self.dtype {
                Dtype::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
                Dtype::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            };
            out.push(v);
            self.pos += width;
        }
        out
    }

    fn take_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, self.take(rows * cols)).expect("sized read")
    }
}

/// Serializes a model to its canonical byte representation.
pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let doc = ConfigDoc::from_model(model);
    let config_json = serde_json::to_vec(&doc).expect("config serializes");
    let dtype = model.config.dtype;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&config_json);
    for block in &model.blocks {
        if let (Some(norm1), Some(attn)) = (&block.norm1, &block.attn) {
            write_values(&mut out, &norm1.scale, dtype);
            write_values(&mut out, attn.wq.data(), dtype);
            write_values(&mut out, attn.wk.data(), dtype);
            write_values(&mut out, attn.wv.data(), dtype);
            write_values(&mut out, attn.wo.data(), dtype);
        }
        if let (Some(norm2), Some(ffn)) = (&block.norm2, &block.ffn) {
            write_values(&mut out, &norm2.scale, dtype);
            write_values(&mut out, ffn.w1.data(), dtype);
            write_values(&mut out, ffn.w2.data(), dtype);
            write_values(&mut out, ffn.w3.data(), dtype);
        }
    }
    Ok(out)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn model_from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    if bytes.len() < 16 {
        return Err(corrupt(path, "file shorter than header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let config_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + config_len {
        return Err(corrupt(path, "truncated config"));
    }
    let doc: ConfigDoc = serde_json::from_slice(&bytes[16..16 + config_len])
        .map_err(|e| corrupt(path, format!("config parse error: {e}")))?;
    if doc.version != VERSION {
        return Err(corrupt(path, format!("unsupported config version {}", doc.version)));
    }
    let config = doc.to_model_config()?;
    config.validate()?;

    let expected = tensor_len(&config) * config.dtype.byte_width();
    let tensor_bytes = &bytes[16 + config_len..];
    if tensor_bytes.len() != expected {
        return Err(corrupt(
            path,
            format!(
                "tensor region is {} bytes, config declares {expected}",
                tensor_bytes.len()
            ),
        ));
    }

    let mut reader = Reader {
        bytes: tensor_bytes,
        pos: 0,
        dtype: config.dtype,
    };
    let d_e = config.d_e;
    let p = config.n_heads * config.head_dim;
    let mut blocks = Vec::with_capacity(config.block_count());
    for spec in &config.block_specs {
        let mut block = Block::identity();
        if spec.has_attention {
            block.norm1 = Some(NormScale {
                scale: reader.take(d_e),
                epsilon: DEFAULT_NORM_EPS,
            });
            block.attn = Some(AttentionWeights {
                wq: reader.take_matrix(p, d_e),
                wk: reader.take_matrix(p, d_e),
                wv: reader.take_matrix(p, d_e),
                wo: reader.take_matrix(d_e, p),
                n_heads: config.n_heads,
                head_dim: config.head_dim,
            });
        }
        if spec.ffn_hidden > 0 {
            block.norm2 = Some(NormScale {
                scale: reader.take(d_e),
                epsilon: DEFAULT_NORM_EPS,
            });
            block.ffn = Some(FfnWeights {
                w1: reader.take_matrix(spec.ffn_hidden, d_e),
                w2: reader.take_matrix(spec.ffn_hidden, d_e),
                w3: reader.take_matrix(d_e, spec.ffn_hidden),
            });
        }
        blocks.push(block);
    }

    let model = Model {
        config,
        blocks,
        stages: doc.stages_or_default(),
    };
    model
        .validate()
        .map_err(|e| corrupt(path, format!("inconsistent model: {e}")))?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    model_from_bytes(&bytes, path)
}

/// Returns a copy of the model tagged for serialization in `dtype`. The
/// narrowing on a later save is explicit through this call.
pub fn with_dtype(model: &Model, dtype: Dtype) -> Model {
    let mut out = model.clone();
    out.config.dtype = dtype;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ffnf_core::model::seeded_model;
    use std::path::PathBuf;

    fn model() -> Model {
        seeded_model(4, 2, 3, &[(true, 5), (false, 6), (false, 0)], 211)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = model();
        let bytes = model_to_bytes(&m).unwrap();
        let loaded = model_from_bytes(&bytes, &PathBuf::from("mem")).unwrap();
        assert_eq!(m, loaded);
        assert_eq!(bytes, model_to_bytes(&loaded).unwrap());
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = model_to_bytes(&model()).unwrap();
        let p = PathBuf::from("mem");
        for cut in [0, 3, 10, 15, bytes.len() - 1] {
            let err = model_from_bytes(&bytes[..cut], &p);
            assert!(matches!(err, Err(IoError::CorruptCheckpoint { .. })), "cut at {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let mut bytes = model_to_bytes(&model()).unwrap();
        let p = PathBuf::from("mem");
        bytes[0] = b'X';
        assert!(matches!(
            model_from_bytes(&bytes, &p),
            Err(IoError::CorruptCheckpoint { .. })
        ));
        let mut bytes = model_to_bytes(&model()).unwrap();
        bytes[4] = 99;
        assert!(matches!(
            model_from_bytes(&bytes, &p),
            Err(IoError::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn byte_flip_changes_one_weight() {
        let m = model();
        let mut bytes = model_to_bytes(&m).unwrap();
        let header = bytes.len() - tensor_len(&m.config) * 8;
        // flip a mantissa bit of the third tensor value
        bytes[header + 2 * 8] ^= 1;
        let loaded = model_from_bytes(&bytes, &PathBuf::from("mem")).unwrap();
        let a = model_to_bytes(&m).unwrap();
        let b = model_to_bytes(&loaded).unwrap();
        let diffs = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert_eq!(diffs, 1);
    }

    #[test]
    fn f32_save_rounds_within_f32_precision() {
        let m = model();
        let narrow = with_dtype(&m, Dtype::F32);
        let bytes = model_to_bytes(&narrow).unwrap();
        let loaded = model_from_bytes(&bytes, &PathBuf::from("mem")).unwrap();
        for (a, b) in m
            .blocks
            .iter()
            .zip(&loaded.blocks)
            .filter_map(|(x, y)| Some((x.ffn.as_ref()?, y.ffn.as_ref()?)))
        {
            for (u, v) in a.w1.data().iter().zip(b.w1.data()) {
                let rel = (u - v).abs() / u.abs().max(f64::MIN_POSITIVE);
                assert!(rel <= 2.0_f64.powi(-23), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn stages_survive_round_trip() {
        let mut m = model();
        m.stages = vec![vec![0], vec![1, 2]];
        let bytes = model_to_bytes(&m).unwrap();
        let loaded = model_from_bytes(&bytes, &PathBuf::from("mem")).unwrap();
        assert_eq!(loaded.stages, m.stages);
    }

    #[test]
    fn save_and_load_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model();
        save_model(&m, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(m, loaded);
    }
}
