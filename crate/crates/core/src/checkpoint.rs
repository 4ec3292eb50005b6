//! Self-describing checkpoint container.
//!
//! ```text
//! offset 0   8 bytes   magic "SAFRCKPT"
//!        8   u32 LE    format version (1)
//!       12   u64 LE    manifest length M in bytes
//!       20   M bytes   UTF-8 JSON manifest
//!     20+M   ...       tensor data, f32 little-endian, row-major, concatenated
//! ```
//!
//! The manifest records the model config, seed, creation time, training
//! progress and, per tensor, its name, shape and element offset into the
//! data section. Tensor names are `param/<name>` for model parameters and
//! running statistics, `centers` for the center-loss centroids and
//! `adam.m/<name>`, `adam.v/<name>` for optimizer moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbones::{build_model, Model, ModelConfig, ModelVariant};
use crate::error::{Error, Result};
use crate::losses::Centers;
use crate::params::Tensor;
use crate::training::Adam;

pub const MAGIC: &[u8; 8] = b"SAFRCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
    pub numel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub variant: ModelVariant,
    pub model: ModelConfig,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub created: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub adam_step: Option<u64>,
    /// Free-form metadata such as the resolved run configuration.
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Training progress stored alongside the model.
#[derive(Clone, Debug, Default)]
pub struct CheckpointState<'a> {
    pub centers: Option<&'a Centers>,
    pub optimizer: Option<&'a Adam>,
    pub epoch: usize,
    pub step: u64,
    pub metadata: serde_json::Value,
}

/// A checkpoint read back into memory.
#[derive(Clone, Debug)]
pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub model: Model,
    pub centers: Option<Centers>,
    pub optimizer: Option<Adam>,
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn save_checkpoint(path: &Path, model: &Model, state: &CheckpointState<'_>) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = model
        .store()
        .iter()
        .map(|(_, e)| (format!("param/{}", e.name), e.value.as_ref()))
        .collect();
    let centers_dyn = state.centers.map(|c| c.0.clone().into_dyn());
    if let Some(c) = &centers_dyn {
        named.push(("centers".into(), c));
    }
    if let Some(opt) = state.optimizer {
        for (id, m, v) in opt.moments() {
            let name = &model.store().entry(id).name;
            named.push((format!("adam.m/{name}"), m));
            named.push((format!("adam.v/{name}"), v));
        }
    }
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0;
    for (name, t) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            numel: t.len(),
        });
        offset += t.len();
    }
    let manifest = CheckpointManifest {
        variant: model.variant(),
        model: model.config().clone(),
        seed: model.seed(),
        created: now(),
        epoch: state.epoch,
        step: state.step,
        adam_step: state.optimizer.map(|o| o.step_count()),
        metadata: state.metadata.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(20 + json.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &named {
        for &v in t.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write to a sibling file and rename so readers never see a partial checkpoint.
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses the header and manifest and returns them with the raw data section.
pub fn read_manifest(bytes: &[u8]) -> Result<(CheckpointManifest, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(json)?;
    Ok((manifest, &bytes[20 + len..]))
}

fn tensor_at(data: &[u8], e: &TensorEntry) -> Result<Tensor> {
    if e.shape.iter().product::<usize>() != e.numel {
        return Err(bad(format!("tensor {} shape {:?} does not hold {} values", e.name, e.shape, e.numel)));
    }
    let bytes = data
        .get(e.offset * 4..(e.offset + e.numel) * 4)
        .ok_or_else(|| bad(format!("tensor {} extends past end of file", e.name)))?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| bad(err.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, data) = read_manifest(&bytes)?;
    let mut model = build_model(&manifest.model, manifest.seed)?;
    let mut centers = None;
    let mut moments = Vec::new();
    let mut loaded = vec![false; model.store().len()];
    for e in &manifest.tensors {
        let t = tensor_at(data, e)?;
        if let Some(name) = e.name.strip_prefix("param/") {
            let id = model
                .store()
                .find(name)
                .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            if model.store().value(id).shape() != t.shape() {
                return Err(bad(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.store().value(id).shape()
                )));
            }
            model.store_mut().set(id, t);
            loaded[id.index()] = true;
        } else if e.name == "centers" {
            let c: Array2<f64> = t
                .into_dimensionality()
                .map_err(|_| bad("centers must be a matrix"))?;
            centers = Some(Centers(c));
        } else if let Some(name) = e.name.strip_prefix("adam.m/") {
            let id = model.store().find(name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            moments.push((id, Some(t), None));
        } else if let Some(name) = e.name.strip_prefix("adam.v/") {
            let id = model.store().find(name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            match moments.iter_mut().find(|(i, _, _)| *i == id) {
                Some(slot) => slot.2 = Some(t),
                None => moments.push((id, None, Some(t))),
            }
        } else {
            return Err(bad(format!("unknown tensor {}", e.name)));
        }
    }
    if let Some(i) = loaded.iter().position(|l| !l) {
        let name = &model.store().iter().nth(i).expect("index in range").1.name;
        return Err(bad(format!("parameter {name} missing from checkpoint")));
    }
    let optimizer = match manifest.adam_step {
        Some(t) => {
            let mut opt = Adam::default();
            for (id, m, v) in moments {
                match (m, v) {
                    (Some(m), Some(v)) => opt.set_moments(id, m, v),
                    _ => return Err(bad("optimizer moments are incomplete")),
                }
            }
            opt.set_step_count(t);
            Some(opt)
        }
        None => None,
    };
    Ok(LoadedCheckpoint {
        manifest,
        model,
        centers,
        optimizer,
    })
}
