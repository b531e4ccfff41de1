//! Checkpoint directories: `checkpoint.json` (format version, model config,
//! seed, tensor table) next to `tensors.bin` (little-endian f64, concatenated
//! in table order). Both files are written to a temporary name and renamed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Cgmm, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub config: AdamConfig,
    pub step_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelConfig,
    /// Every random stream of a run is keyed by this seed, so it is the whole RNG state.
    pub seed: u64,
    pub optimizer: Option<OptimizerEntry>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Cgmm,
    pub optimizer: Option<AdamState>,
    pub seed: u64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Tensors in blob order: parameters, then Adam first and second moments.
fn named_tensors(ck: &Checkpoint) -> Vec<(String, &Tensor)> {
    let names = ck.model.store.names();
    let mut out: Vec<(String, &Tensor)> = names.iter().cloned().zip(ck.model.store.tensors()).collect();
    if let Some(opt) = &ck.optimizer {
        out.extend(names.iter().map(|n| format!("adam.m.{n}")).zip(&opt.first_moment));
        out.extend(names.iter().map(|n| format!("adam.v.{n}")).zip(&opt.second_moment));
    }
    out
}

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named_tensors(ck) {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        model: ck.model.config.clone(),
        seed: ck.seed,
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerEntry {
            config: o.config,
            step_count: o.step_count,
        }),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    // Check the version before the layout so old files get a clear message.
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        other => {
            return Err(Error::Format {
                path,
                offset: 0,
                message: format!("unsupported checkpoint version {other:?}, expected {CHECKPOINT_VERSION}"),
            })
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Load {
        path,
        line: 0,
        message: e.to_string(),
    })
}

/// Loads a checkpoint. Every entry is checked against a freshly built model
/// before the blob is read.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mut ck = Checkpoint {
        model: Cgmm::new(&manifest.model, manifest.seed)?,
        optimizer: None,
        seed: manifest.seed,
    };
    if let Some(o) = &manifest.optimizer {
        let mut state = AdamState::new(o.config, ck.model.store.tensors());
        state.step_count = o.step_count;
        ck.optimizer = Some(state);
    }
    let expected: Vec<(String, Vec<usize>)> = named_tensors(&ck)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        let missing = expected
            .iter()
            .find(|(n, _)| !manifest.tensors.iter().any(|e| &e.name == n))
            .map(|(n, _)| n.clone())
            .unwrap_or_else(|| manifest.tensors.get(expected.len()).map(|e| e.name.clone()).unwrap_or_default());
        return Err(Error::Checkpoint {
            tensor: missing,
            message: format!("manifest lists {} tensors, model has {}", manifest.tensors.len(), expected.len()),
        });
    }
    let mut offset = 0u64;
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(Error::Checkpoint {
                tensor: entry.name.clone(),
                message: format!("expected tensor '{name}' at this position"),
            });
        }
        if &entry.shape != shape {
            return Err(Error::Checkpoint {
                tensor: name.clone(),
                message: format!("shape {:?} in manifest, model expects {:?}", entry.shape, shape),
            });
        }
        if entry.offset != offset {
            return Err(Error::Checkpoint {
                tensor: name.clone(),
                message: format!("offset {} in manifest, expected {offset}", entry.offset),
            });
        }
        offset += 8 * shape.iter().product::<usize>() as u64;
    }

    let path = dir.join(BLOB_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut values = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        let start = entry.offset as usize;
        let end = start + 8 * shape.iter().product::<usize>();
        if end > blob.len() {
            return Err(Error::Checkpoint {
                tensor: name.clone(),
                message: format!("truncated blob: needs bytes {start}..{end}, file has {}", blob.len()),
            });
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push(Tensor::new(shape.clone(), data)?);
    }
    if blob.len() as u64 != offset {
        return Err(Error::Format {
            path,
            offset: offset as usize,
            message: format!("{} trailing bytes after the last tensor", blob.len() as u64 - offset),
        });
    }

    let n = ck.model.store.len();
    let mut values = values.into_iter();
    for t in ck.model.store.tensors_mut() {
        *t = values.next().expect("counted");
    }
    if let Some(opt) = &mut ck.optimizer {
        for m in opt.first_moment.iter_mut().take(n) {
            *m = values.next().expect("counted");
        }
        for v in opt.second_moment.iter_mut().take(n) {
            *v = values.next().expect("counted");
        }
    }
    Ok(ck)
}
