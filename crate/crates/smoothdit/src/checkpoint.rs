//! Weight checkpoints: a JSON manifest naming one DTEN file per parameter.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smoothdit_core::{dten, Dit, ModelConfig};

use crate::formats::TOOL_VERSION;
use crate::fsio::{read, sha256_hex, write_atomic, write_json};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelJson {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub seq_len: usize,
    pub in_dim: usize,
}

impl From<ModelConfig> for ModelJson {
    fn from(c: ModelConfig) -> Self {
        Self {
            depth: c.depth,
            width: c.width,
            heads: c.heads,
            ffn_mult: c.ffn_mult,
            seq_len: c.seq_len,
            in_dim: c.in_dim,
        }
    }
}

impl From<ModelJson> for ModelConfig {
    fn from(c: ModelJson) -> Self {
        Self {
            depth: c.depth,
            width: c.width,
            heads: c.heads,
            ffn_mult: c.ffn_mult,
            seq_len: c.seq_len,
            in_dim: c.in_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    /// Relative to the manifest.
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

/// How the weights were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub init_seed: u64,
    pub data_seed: u64,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub optimizer: String,
    pub cond_drop: f32,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub loss_curve: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub model: ModelJson,
    pub training_seed: u64,
    pub model_checksum: String,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingRecord>,
}

/// sha256 over every parameter's name and DTEN encoding, in parameter
/// order. Independent of where the files live.
pub fn model_checksum(model: &Dit) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.param_names().iter().zip(model.tensors()) {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update(dten::encode(t));
    }
    hex::encode(h.finalize())
}

fn param_file(name: &str) -> String {
    format!("params/{name}.dten")
}

/// Writes `dir/manifest.json` and `dir/params/*.dten`.
pub fn save(dir: &Path, model: &Dit, training_seed: u64, training: Option<TrainingRecord>) -> Result<Manifest> {
    let mut params = Vec::new();
    for (name, t) in model.param_names().into_iter().zip(model.tensors()) {
        let bytes = dten::encode(t);
        let file = param_file(&name);
        write_atomic(&dir.join(&file), &bytes)?;
        params.push(ParamEntry {
            name,
            file,
            shape: t.dims().to_vec(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        tool_version: TOOL_VERSION.into(),
        model: model.config.into(),
        training_seed,
        model_checksum: model_checksum(model),
        params,
        training,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

/// Accepts the manifest itself or the directory holding it.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

pub struct Loaded {
    pub model: Dit,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub manifest_sha256: String,
}

/// Loads and verifies every parameter checksum and shape.
pub fn load(path: &Path) -> Result<Loaded> {
    let manifest_path = manifest_path(path);
    let bytes = read(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", manifest_path.display()))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut model = Dit::zeros(manifest.model.into())?;
    let names = model.param_names();
    ensure!(
        names.len() == manifest.params.len(),
        "manifest lists {} parameters, model has {}",
        manifest.params.len(),
        names.len()
    );
    for ((name, slot), entry) in names.iter().zip(model.tensors_mut()).zip(&manifest.params) {
        if &entry.name != name {
            bail!("manifest parameter {} where {name} was expected", entry.name);
        }
        let file = dir.join(&entry.file);
        let raw = read(&file)?;
        ensure!(sha256_hex(&raw) == entry.sha256, "checksum mismatch for {}", file.display());
        let t = dten::decode(&raw).with_context(|| format!("decoding {}", file.display()))?;
        ensure!(
            t.dims() == slot.dims(),
            "{name}: file shape {:?}, model expects {:?}",
            t.dims(),
            slot.dims()
        );
        *slot = t;
    }
    ensure!(model_checksum(&model) == manifest.model_checksum, "model checksum mismatch");
    Ok(Loaded {
        model,
        manifest,
        manifest_path,
        manifest_sha256: sha256_hex(&bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dit {
        let cfg = ModelConfig {
            depth: 2,
            width: 8,
            heads: 2,
            ffn_mult: 2,
            seq_len: 4,
            in_dim: 2,
        };
        Dit::init(cfg, 5).unwrap()
    }

    #[test]
    fn save_then_load_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny();
        let saved = save(dir.path(), &model, 9, None).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.manifest, saved);
        for (a, b) in loaded.model.tensors().iter().zip(model.tensors()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn tampered_weights_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny();
        let m = save(dir.path(), &model, 9, None).unwrap();
        let f = dir.path().join(&m.params[3].file);
        let mut bytes = std::fs::read(&f).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        std::fs::write(&f, bytes).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
