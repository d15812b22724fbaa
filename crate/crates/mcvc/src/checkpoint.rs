//! Checkpoint directories: `manifest.json` plus one little-endian f32 blob
//! per parameter, row-major.

use std::path::{Path, PathBuf};

use mcvc_core::backbone::ModelConfig;
use mcvc_core::conditioning::ConditioningConfig;
use mcvc_core::model::Model;
use mcvc_core::params::{FreezePolicy, ParamStore};
use mcvc_core::tensor::Mat;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fsutil;

pub const FORMAT: &str = "mcvc-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub frozen: bool,
    pub file: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: usize,
    pub config: RunConfig,
    pub params: Vec<ParamEntry>,
    /// Hash over every parameter's name and blob hash, in order.
    pub content_hash: String,
}

fn blob(m: &Mat) -> Vec<u8> {
    m.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

fn combined_hash(params: &[ParamEntry]) -> String {
    let mut s = String::new();
    for p in params {
        s.push_str(&p.name);
        s.push(' ');
        s.push_str(&p.hash);
        s.push('\n');
    }
    fsutil::content_hash(s.as_bytes())
}

/// Write `store` to `dir`; returns the manifest.
pub fn save(
    dir: &Path,
    config: &RunConfig,
    store: &ParamStore,
    freeze: &FreezePolicy,
    step: usize,
) -> Result<CheckpointManifest> {
    fsutil::create_dir(&dir.join("params"))?;
    let mut params = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let file = format!("params/{:04}.bin", id.0);
        let bytes = blob(&p.value);
        fsutil::write_atomic(&dir.join(&file), &bytes)?;
        params.push(ParamEntry {
            name: p.name.clone(),
            group: p.group.to_string(),
            shape: [p.value.rows, p.value.cols],
            dtype: crate::tensorfile::DTYPE.into(),
            frozen: freeze.is_frozen(p.group),
            file,
            hash: fsutil::content_hash(&bytes),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        step,
        config: config.clone(),
        content_hash: combined_hash(&params),
        params,
    };
    fsutil::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} has no manifest.json", dir.display())));
    }
    let m: CheckpointManifest = fsutil::read_json(&path).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", m.format)));
    }
    Ok(m)
}

/// A loaded checkpoint with the model rebuilt from its stored config.
pub struct Loaded {
    pub manifest: CheckpointManifest,
    pub model: Model,
    pub store: ParamStore,
}

impl Loaded {
    pub fn model_config(&self) -> ModelConfig {
        self.manifest.config.model_config()
    }

    pub fn conditioning_config(&self) -> ConditioningConfig {
        self.manifest.config.conditioning_config()
    }
}

/// Load and verify every blob against its recorded hash and shape.
pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest = read_manifest(dir)?;
    let cfg = &manifest.config;
    let (model, mut store) = Model::init(&cfg.model_config(), &cfg.conditioning_config(), 0)?;
    if store.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    if combined_hash(&manifest.params) != manifest.content_hash {
        return Err(Error::Checkpoint("content hash mismatch".into()));
    }
    for e in &manifest.params {
        let id = store
            .id(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
        let want = store.value(id).shape();
        if (e.shape[0], e.shape[1]) != want {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} does not match model {:?}",
                e.name, e.shape, want
            )));
        }
        let path: PathBuf = dir.join(&e.file);
        let bytes = fsutil::read(&path).map_err(|err| Error::Checkpoint(err.to_string()))?;
        if fsutil::content_hash(&bytes) != e.hash {
            return Err(Error::Checkpoint(format!("{}: blob hash mismatch", e.name)));
        }
        if bytes.len() != e.shape[0] * e.shape[1] * 4 {
            return Err(Error::Checkpoint(format!("{}: blob has {} bytes", e.name, bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        *store.value_mut(id) = Mat::from_vec(e.shape[0], e.shape[1], data)?;
    }
    Ok(Loaded { manifest, model, store })
}

/// Round every parameter through f32, matching what a checkpoint stores.
pub fn quantize(store: &mut ParamStore) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcvc_core::model::flatten;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.depth = 1;
        c.model.width = 16;
        c.model.concept_dim = 16;
        c
    }

    #[test]
    fn save_load_round_trips_at_f32() {
        let cfg = small();
        let (_, mut store) = Model::init(&cfg.model_config(), &cfg.conditioning_config(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &cfg, &store, &cfg.freeze_policy(), 0).unwrap();
        let loaded = load(dir.path()).unwrap();
        quantize(&mut store);
        assert_eq!(flatten(&loaded.store), flatten(&store));
        assert!(loaded
            .manifest
            .params
            .iter()
            .any(|p| p.frozen && p.group == mcvc_core::params::group::SPATIOTEMPORAL_ATTN));
    }

    #[test]
    fn corrupted_blob_is_detected() {
        let cfg = small();
        let (_, store) = Model::init(&cfg.model_config(), &cfg.conditioning_config(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save(dir.path(), &cfg, &store, &cfg.freeze_policy(), 0).unwrap();
        let path = dir.path().join(&m.params[3].file);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
        assert!(matches!(load(&dir.path().join("nope")), Err(Error::Checkpoint(_))));
    }
}
