//! Checkpoint archive: a directory holding `manifest.json` (metadata) and
//! `params.bin` (little-endian `f32` parameters in layout order); see
//! `docs/formats.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LmError, ModelConfig, PolicyModel};

pub const CHECKPOINT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: ModelConfig,
    pub checkpoint_id: String,
    pub step: usize,
    pub rng_seed: u64,
    /// Hash of the dataset the parameters were last trained on, if any.
    pub dataset_hash: Option<String>,
    pub params_sha256: String,
    pub n_params: usize,
}

impl CheckpointMeta {
    pub fn for_model(model: &PolicyModel, step: usize, rng_seed: u64, dataset_hash: Option<String>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: *model.config(),
            checkpoint_id: model.checkpoint_id(),
            step,
            rng_seed,
            dataset_hash,
            params_sha256: String::new(),
            n_params: model.num_params(),
        }
    }
}

pub fn save(model: &PolicyModel, meta: &CheckpointMeta, dir: &Path) -> Result<(), LmError> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(model.num_params() * 4);
    for p in model.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let mut meta = meta.clone();
    meta.params_sha256 = hex::encode(Sha256::digest(&bytes));
    meta.n_params = model.num_params();
    meta.config = *model.config();
    meta.checkpoint_id = model.checkpoint_id();
    fs::write(dir.join(PARAMS), &bytes)?;
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(PolicyModel, CheckpointMeta), LmError> {
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(LmError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let meta: CheckpointMeta = serde_json::from_value(raw)?;
    let bytes = fs::read(dir.join(PARAMS))?;
    if hex::encode(Sha256::digest(&bytes)) != meta.params_sha256 {
        return Err(LmError::Corrupt("parameter blob checksum mismatch".into()));
    }
    if bytes.len() != meta.n_params * 4 {
        return Err(LmError::Corrupt(format!(
            "expected {} parameter bytes, found {}",
            meta.n_params * 4,
            bytes.len()
        )));
    }
    let params = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let model = PolicyModel::from_parts(meta.config, params)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> PolicyModel {
        PolicyModel::new(ModelConfig {
            vocab_size: 10,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 12,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let meta = CheckpointMeta::for_model(&m, 17, 5, Some("abc".into()));
        save(&m, &meta, dir.path()).unwrap();
        let (back, meta2) = load(dir.path()).unwrap();
        let probe = [1u32, 4, 7, 2];
        assert_eq!(m.forward_logprobs(&probe).unwrap(), back.forward_logprobs(&probe).unwrap());
        assert_eq!(meta2.step, 17);
        assert_eq!(meta2.dataset_hash.as_deref(), Some("abc"));
        assert_eq!(meta2.checkpoint_id, m.checkpoint_id());
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save(&m, &CheckpointMeta::for_model(&m, 0, 0, None), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 7");
        fs::write(&path, text).unwrap();
        assert!(matches!(load(dir.path()), Err(LmError::Version { found: 7, .. })));
    }

    #[test]
    fn corrupt_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save(&m, &CheckpointMeta::for_model(&m, 0, 0, None), dir.path()).unwrap();
        let mut bytes = fs::read(dir.path().join(PARAMS)).unwrap();
        bytes[10] ^= 0xFF;
        fs::write(dir.path().join(PARAMS), bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(LmError::Corrupt(_))));
    }
}
