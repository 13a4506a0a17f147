//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "ABFTCKPT"
//! version  u32 LE
//! cfg_len  u64 LE
//! config   cfg_len bytes of UTF-8 TOML (CheckpointMeta)
//! tensors  per tensor in architecture order:
//!          rank u16 LE, extents u64 LE each, f32 LE data
//! checksum 8 bytes: leading bytes of SHA-256 over everything above
//! ```

use std::path::Path;

use abft_core::model::{param_layout, ModelConfig, TransformerModel};
use abft_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"ABFTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch")]
    Checksum,
    #[error("malformed embedded config: {0}")]
    Header(String),
    #[error("tensor {index} has shape {found:?}, architecture expects {expected:?}")]
    Shape {
        index: usize,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{0} unexpected bytes after the checksum")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Pipeline stage that produced the weights (`pretrain`, `abft`, `e2e`).
    pub stage: String,
    pub config_hash: String,
    pub model: ModelConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: TransformerModel<f32>,
}

pub fn encode(meta: &CheckpointMeta, model: &TransformerModel<f32>) -> Vec<u8> {
    let text = toml::to_string(meta).expect("meta is representable as TOML");
    let mut out = Vec::with_capacity(64 + text.len() + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for t in model.params() {
        out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..8]);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic").map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u64("config length")?;
    let len = usize::try_from(len).map_err(|_| CheckpointError::Truncated("config"))?;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let meta: CheckpointMeta = toml::from_str(text).map_err(|e| CheckpointError::Header(e.message().to_string()))?;
    meta.model.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut raw_params = Vec::new();
    for (index, (_, expected)) in param_layout(&meta.model).into_iter().enumerate() {
        let rank = r.u16("tensor rank")? as usize;
        let found = (0..rank).map(|_| r.u64("tensor extents").map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
        if found != expected {
            return Err(CheckpointError::Shape { index, found, expected });
        }
        let n: usize = found.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?, "tensor data")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        raw_params.push((found, data));
    }
    let body = r.pos;
    let sum = r.take(8, "checksum")?;
    if sum != &Sha256::digest(&bytes[..body])[..8] {
        return Err(CheckpointError::Checksum);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    let params = raw_params
        .into_iter()
        .map(|(shape, data)| Tensor::new(shape, data))
        .collect::<abft_core::Result<Vec<_>>>()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let model = TransformerModel::from_params(meta.model, params).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok(Checkpoint { meta, model })
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, model: &TransformerModel<f32>) -> Result<()> {
    if meta.model != *model.config() {
        return Err(LabError::Core(abft_core::Error::Contract("checkpoint meta does not describe the model".into())));
    }
    let bytes = encode(meta, model);
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| LabError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes).map_err(|source| LabError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (CheckpointMeta, TransformerModel<f32>) {
        let mut exp = ExperimentConfig::default();
        exp.model.n_layers = 1;
        exp.model.d_model = 16;
        exp.model.n_heads = 2;
        let model = TransformerModel::init(exp.model_config()).unwrap();
        let meta = CheckpointMeta {
            stage: "pretrain".into(),
            config_hash: exp.hash(),
            model: exp.model_config(),
            experiment: exp,
        };
        (meta, model)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (meta, model) = sample();
        let back = decode(&encode(&meta, &model)).unwrap();
        assert_eq!(back.meta, meta);
        for (a, b) in back.model.params().iter().zip(model.params()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let (meta, model) = sample();
        let bytes = encode(&meta, &model);
        for cut in [0, 4, 8, 11, 20, bytes.len() / 2, bytes.len() - 9, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn failure_classes() {
        let (meta, model) = sample();
        let bytes = encode(&meta, &model);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::Magic)));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(decode(&bad), Err(CheckpointError::Version { found: 2, .. })));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 20] ^= 1;
        assert!(matches!(decode(&bad), Err(CheckpointError::Checksum)));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(decode(&bad), Err(CheckpointError::Trailing(1))));
    }
}
