//! Checkpoint directories: `manifest.json` describing named tensors, a
//! `tensors.bin` payload of little-endian `f32` values, and an optional
//! configuration snapshot.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{hex, AdamW, AdamWConfig, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "tensors.bin";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub stage: String,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
    pub seed: u64,
    /// Free-form stage metadata (optimiser step, dimensions, ...).
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
    pub config: Option<String>,
}

impl Checkpoint {
    pub fn hash(&self) -> &str {
        &self.manifest.payload_sha256
    }
}

fn payload(params: &ParamStore<f32>) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::with_capacity(params.num_scalars() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset: bytes.len() });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, entries)
}

fn sha(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes a checkpoint directory (created if needed) and returns the payload
/// hash. Identical inputs produce byte-identical files.
pub fn save_checkpoint(
    dir: &Path,
    stage: &str,
    params: &ParamStore<f32>,
    meta: serde_json::Value,
    config: Option<&str>,
) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bytes, tensors) = payload(params);
    let payload_sha256 = sha(&bytes);
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        stage: stage.to_string(),
        tensors,
        payload_sha256: payload_sha256.clone(),
        seed: params.rng_seed,
        meta,
    };
    let bin = dir.join(PAYLOAD);
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mf = dir.join(MANIFEST);
    fs::write(&mf, text).map_err(|e| Error::io(&mf, e))?;
    if let Some(c) = config {
        let cf = dir.join(CONFIG_SNAPSHOT);
        fs::write(&cf, c).map_err(|e| Error::io(&cf, e))?;
    }
    Ok(payload_sha256)
}

/// Loads and verifies a checkpoint. `expect_stage` rejects a directory
/// holding a different stage.
pub fn load_checkpoint(dir: &Path, expect_stage: Option<&str>) -> Result<Checkpoint> {
    let mf = dir.join(MANIFEST);
    if !mf.exists() {
        return Err(Error::MissingPrerequisite(format!("checkpoint {}", dir.display())));
    }
    let text = fs::read_to_string(&mf).map_err(|e| Error::io(&mf, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mf.display())))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", manifest.version)));
    }
    if let Some(s) = expect_stage {
        if manifest.stage != s {
            return Err(Error::Checkpoint(format!("{} holds stage {:?}, expected {s:?}", dir.display(), manifest.stage)));
        }
    }
    let bin = dir.join(PAYLOAD);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if sha(&bytes) != manifest.payload_sha256 {
        return Err(Error::Checkpoint(format!("{}: payload hash mismatch", bin.display())));
    }
    let mut params = ParamStore::new(manifest.seed);
    for e in &manifest.tensors {
        let len: usize = e.shape.iter().product();
        let end = e.offset + 4 * len;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("tensor {} overruns the payload", e.name)));
        }
        let data: Vec<f32> = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    let cf = dir.join(CONFIG_SNAPSHOT);
    let config = if cf.exists() { Some(fs::read_to_string(&cf).map_err(|e| Error::io(&cf, e))?) } else { None };
    Ok(Checkpoint { manifest, params, config })
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Model parameters plus optimiser moments in one store, for resumable
/// checkpoints.
pub fn with_optimizer(params: &ParamStore<f32>, opt: &AdamW<f32>) -> Result<ParamStore<f32>> {
    let mut out = params.clone();
    for (k, t) in &opt.m {
        out.insert(format!("{ADAM_M}{k}"), t.clone())?;
    }
    for (k, t) in &opt.v {
        out.insert(format!("{ADAM_V}{k}"), t.clone())?;
    }
    Ok(out)
}

/// Splits a store written by [`with_optimizer`].
pub fn split_optimizer(store: &ParamStore<f32>, config: AdamWConfig, step: u64) -> (ParamStore<f32>, AdamW<f32>) {
    let mut params = ParamStore::new(store.rng_seed);
    let mut opt = AdamW::new(config);
    opt.step = step;
    for (k, t) in store.iter() {
        if let Some(name) = k.strip_prefix(ADAM_M) {
            opt.m.insert(name.to_string(), t.clone());
        } else if let Some(name) = k.strip_prefix(ADAM_V) {
            opt.v.insert(name.to_string(), t.clone());
        } else {
            params.set(k, t.clone());
        }
    }
    (params, opt)
}

/// Conventional checkpoint directory for a stage under a run root.
pub fn stage_dir(root: &Path, stage: &str) -> PathBuf {
    root.join("checkpoints").join(stage)
}
