//! Checkpoints: a JSON manifest plus a raw binary of parameter values.
//!
//! The manifest records the model configuration, root seed, adapter
//! description, the caller's configuration echo, and one record per
//! parameter (name, shape, freeze flag) in registration order. The binary
//! holds every parameter's `f64` values little-endian, concatenated in that
//! same order. Loading rebuilds the model from the embedded configuration,
//! re-attaches adapters when the manifest says so, and validates every
//! record shape-for-shape before filling values.

use crate::error::{Error, Result};
use crate::lora::LoraMeta;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_TAG: &str = "echo-moe-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    config: ModelConfig,
    lora: Option<LoraMeta>,
    config_echo: serde_json::Value,
    params: Vec<ParamRecord>,
}

fn write_err(path: &Path, e: std::io::Error) -> Error {
    Error::Train(format!("checkpoint write failed at {}: {e}", path.display()))
}

fn read_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("checkpoint read failed at {}: {e}", path.display()))
}

/// Write `dir/manifest.json` and `dir/params.bin`.
pub fn save(dir: &Path, model: &Model, seed: u64, config_echo: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
    let params: Vec<ParamRecord> = model
        .store
        .iter()
        .map(|(_, e)| ParamRecord {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            frozen: e.frozen,
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        seed,
        config: model.cfg.clone(),
        lora: model.adapters.as_ref().map(|a| a.meta()),
        config_echo: config_echo.clone(),
        params,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, json).map_err(|e| write_err(&manifest_path, e))?;

    let mut bin = Vec::new();
    for (_, entry) in model.store.iter() {
        for v in entry.value.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin_path = dir.join(PARAMS_FILE);
    fs::write(&bin_path, bin).map_err(|e| write_err(&bin_path, e))?;
    Ok(())
}

/// Result of loading a checkpoint.
pub struct Loaded {
    pub model: Model,
    pub seed: u64,
    pub config_echo: serde_json::Value,
}

/// Rebuild a model from a checkpoint directory.
pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = fs::read_to_string(&manifest_path).map_err(|e| read_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Data(format!("malformed manifest {}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    let mut model = Model::init(manifest.config.clone(), manifest.seed)?;
    if let Some(meta) = &manifest.lora {
        model.attach_adapters(meta.rank, meta.alpha, meta.dropout_p, manifest.seed)?;
    }

    let bin_path = dir.join(PARAMS_FILE);
    let bin = fs::read(&bin_path).map_err(|e| read_err(&bin_path, e))?;
    let total_elems: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if bin.len() != total_elems * 8 {
        return Err(Error::Data(format!(
            "parameter file holds {} bytes, manifest implies {}",
            bin.len(),
            total_elems * 8
        )));
    }

    let mut offset = 0usize;
    for record in &manifest.params {
        let id = model.store.find(&record.name).ok_or_else(|| {
            Error::Data(format!(
                "checkpoint parameter {:?} does not exist in a model of this configuration",
                record.name
            ))
        })?;
        let expected = model.store.value(id).shape();
        if expected != record.shape.as_slice() {
            return Err(Error::Data(format!(
                "parameter {:?} has shape {:?} in the checkpoint but {:?} in the configuration",
                record.name, record.shape, expected
            )));
        }
        let numel: usize = record.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = offset + i * 8;
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&bin[at..at + 8]);
            data.push(f64::from_le_bytes(buf));
        }
        offset += numel * 8;
        model.store.set_value(id, Tensor::new(record.shape.clone(), data)?);
        model.store.set_frozen(id, record.frozen);
    }
    Ok(Loaded { model, seed: manifest.seed, config_echo: manifest.config_echo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("echo-moe-ckpt-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            vocab: 16,
            patch: 2,
            merge: 4,
            channels: 1,
            d_visual: 4,
            d_merged: 5,
            proj_hidden: 6,
            n_experts: 2,
            top_k: 1,
            expert_hidden: 4,
            shared_hidden: 16,
            max_len: 24,
            eos_id: 14,
            sep_id: 15,
        }
    }

    #[test]
    fn round_trip_preserves_every_value() {
        let dir = tmpdir("roundtrip");
        let model = Model::init(small_cfg(), 42).unwrap();
        let echo = serde_json::json!({"run": "unit"});
        save(&dir, &model, 42, &echo).unwrap();
        let loaded = load(&dir).unwrap();
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.config_echo, echo);
        assert_eq!(loaded.model.store.len(), model.store.len());
        for (id, entry) in model.store.iter() {
            let lid = loaded.model.store.find(&entry.name).unwrap();
            assert_eq!(loaded.model.store.value(lid).data(), entry.value.data());
            assert_eq!(loaded.model.store.is_frozen(lid), model.store.is_frozen(id));
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn adapters_round_trip_in_their_own_namespace() {
        let dir = tmpdir("lora");
        let mut model = Model::init(small_cfg(), 7).unwrap();
        model.attach_adapters(2, 16.0, 0.05, 7).unwrap();
        save(&dir, &model, 7, &serde_json::Value::Null).unwrap();
        let loaded = load(&dir).unwrap();
        let set = loaded.model.adapters.as_ref().unwrap();
        assert_eq!(set.rank, 2);
        assert!(set
            .adapters
            .iter()
            .all(|a| loaded.model.store.name(a.a).starts_with("lora.")));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn stage_one_checkpoint_loads_without_adapters() {
        let dir = tmpdir("plain");
        let model = Model::init(small_cfg(), 9).unwrap();
        save(&dir, &model, 9, &serde_json::Value::Null).unwrap();
        let loaded = load(&dir).unwrap();
        assert!(loaded.model.adapters.is_none());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tmpdir("trunc");
        let model = Model::init(small_cfg(), 3).unwrap();
        save(&dir, &model, 3, &serde_json::Value::Null).unwrap();
        let bin_path = dir.join(PARAMS_FILE);
        let bin = fs::read(&bin_path).unwrap();
        fs::write(&bin_path, &bin[..bin.len() - 8]).unwrap();
        assert!(matches!(load(&dir), Err(Error::Data(_))));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn shape_drift_is_rejected() {
        let dir = tmpdir("shape");
        let model = Model::init(small_cfg(), 4).unwrap();
        save(&dir, &model, 4, &serde_json::Value::Null).unwrap();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap();
        let mut manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
        manifest["params"][0]["shape"] = serde_json::json!([1, 1]);
        fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(load(&dir), Err(Error::Data(_))));
        fs::remove_dir_all(&dir).unwrap();
    }
}
