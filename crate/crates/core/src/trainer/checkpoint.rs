//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes   "SUPSETCK"
//! version      u32 LE
//! header_len   u64 LE
//! header       JSON: {version, config, dims, manifest: [{name, rows, cols, trainable}]}
//! blocks       f32 LE, one block per manifest entry, row-major, in manifest order
//! digest       32 bytes  SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SUPSETCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: TrainConfig,
    dims: ModelDims,
    manifest: Vec<ManifestEntry>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Rebuilds the model the checkpoint was saved from.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.config.model_spec(self.dims), 0)?;
        model.load_params(&self.params)?;
        Ok(model)
    }
}

pub fn checkpoint_bytes(config: &TrainConfig, model: &Model) -> Result<Vec<u8>> {
    let store = model.store();
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        dims: model.dims(),
        manifest: store
            .entries()
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                rows: e.value.rows(),
                cols: e.value.cols(),
                trainable: e.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 4 * store.num_scalars(false) + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in store.entries() {
        for &x in e.value.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, model: &Model) -> Result<()> {
    let bytes = checkpoint_bytes(config, model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |message: String| Error::Checkpoint { path: path.to_path_buf(), message };
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        if bytes.len() < 12 && CHECKPOINT_MAGIC.starts_with(&bytes[..bytes.len().min(8)]) {
            return Err(fail(format!("integrity check failed: truncated at {} bytes", bytes.len())));
        }
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported format version {version}; this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    if bytes.len() < 20 + DIGEST_LEN {
        return Err(fail(format!("integrity check failed: truncated at {} bytes", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("integrity check failed: file is truncated or corrupted".into()));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| fail("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| fail(format!("bad header: {e}")))?;
    if header.version != version {
        return Err(fail(format!("header version {} disagrees with file version {version}", header.version)));
    }
    let blocks = &body[header_end..];
    let expected: usize = header.manifest.iter().map(|m| m.rows * m.cols * 4).sum();
    if blocks.len() != expected {
        return Err(fail(format!("parameter blocks hold {} bytes, manifest expects {expected}", blocks.len())));
    }
    let mut params = ParamStore::new();
    let mut off = 0;
    for m in header.manifest {
        let n = m.rows * m.cols;
        let data = blocks[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        off += 4 * n;
        params.register(m.name, Matrix::from_vec(m.rows, m.cols, data), m.trainable);
    }
    Ok(Checkpoint { config: header.config, dims: header.dims, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::PoolingHeadConfig;

    fn model_with(d: usize) -> (TrainConfig, Model) {
        let cfg = TrainConfig {
            model: PoolingHeadConfig {
                embed_dim: d,
                num_heads: 2,
                ffn_hidden: 8,
                num_layers: 1,
                conv_kernel_sizes: vec![2],
                ..Default::default()
            },
            ..Default::default()
        };
        let dims = ModelDims { feature_dim: 3, vocab_size: 8, video_len: 3, caption_len_max: 4 };
        let m = Model::new(cfg.model_spec(dims), 11).unwrap();
        (cfg, m)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, m) = model_with(4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &cfg, &m).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.config, cfg);
        let back = ck.into_model().unwrap();
        for id in m.store().ids() {
            assert_eq!(m.store().get(id), back.store().get(id));
            assert_eq!(m.store().entry(id).trainable, back.store().entry(id).trainable);
        }
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let (cfg, m) = model_with(4);
        let bytes = checkpoint_bytes(&cfg, &m).unwrap();
        let p = Path::new("mem");
        for cut in [bytes.len() - 1, bytes.len() / 2, 30, 10] {
            let err = parse_checkpoint(&bytes[..cut], p).unwrap_err().to_string();
            assert!(err.contains("integrity"), "{cut}: {err}");
        }
        let mut other = bytes.clone();
        other[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = parse_checkpoint(&other, p).unwrap_err().to_string();
        assert!(err.contains("version 7"), "{err}");
        let mut flipped = bytes;
        let last = flipped.len() - 40;
        flipped[last] ^= 1;
        assert!(parse_checkpoint(&flipped, p).is_err());
    }

    #[test]
    fn mismatched_width_is_rejected() {
        let (cfg, m) = model_with(4);
        let bytes = checkpoint_bytes(&cfg, &m).unwrap();
        let ck = parse_checkpoint(&bytes, Path::new("mem")).unwrap();
        let (_, mut wider) = model_with(6);
        assert!(matches!(wider.load_params(&ck.params), Err(Error::Shape(_))));
    }
}
