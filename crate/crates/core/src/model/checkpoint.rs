//! Checkpoint directory: `manifest.json` (config, step, tensor table) and
//! `weights.bin` (little-endian `f32` values in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DsMoeModel, ModelConfig};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "dsmoe-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub config: ModelConfig,
    pub tensors: Vec<ManifestEntry>,
}

pub fn save_checkpoint(model: &DsMoeModel, dir: impl AsRef<Path>, step: u64) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    model.visit("", &mut |name, t| {
        let offset = blob.len() as u64;
        for v in t.to_f32_vec() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(ManifestEntry {
            name,
            shape: t.dims().to_vec(),
            dtype: "f32".into(),
            offset,
            length: blob.len() as u64 - offset,
        });
    });
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        step,
        config: model.config.clone(),
        tensors,
    };
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, &blob).map_err(|e| Error::io(&weights, e))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn integrity(tensor: &str, reason: impl Into<String>) -> Error {
    Error::Integrity {
        tensor: tensor.to_string(),
        reason: reason.into(),
    }
}

/// Loads a checkpoint, returning the model and its training step.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(DsMoeModel, u64)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| integrity(MANIFEST_FILE, e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(integrity(
            MANIFEST_FILE,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let weights = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
    let mut model = DsMoeModel::zeros(&manifest.config)?;

    let mut expected = Vec::new();
    model.visit("", &mut |name, t| expected.push((name, t.dims().to_vec())));
    if expected.len() != manifest.tensors.len() {
        return Err(integrity(
            MANIFEST_FILE,
            format!("{} tensors listed, model has {}", manifest.tensors.len(), expected.len()),
        ));
    }
    let mut cursor = 0u64;
    let mut loaded = Vec::with_capacity(expected.len());
    for (entry, (name, dims)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != dims {
            return Err(integrity(&entry.name, format!("expected {name} with shape {dims:?}")));
        }
        if entry.dtype != "f32" {
            return Err(integrity(&entry.name, format!("unsupported dtype {}", entry.dtype)));
        }
        let numel: usize = dims.iter().product();
        if entry.offset != cursor || entry.length != 4 * numel as u64 {
            return Err(integrity(&entry.name, "offsets are not contiguous"));
        }
        let end = entry.offset + entry.length;
        if end > blob.len() as u64 {
            return Err(integrity(
                &entry.name,
                format!("blob truncated: needs {end} bytes, found {}", blob.len()),
            ));
        }
        let values: Vec<f32> = blob[entry.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        loaded.push(Tensor::from_f32(dims, &values)?);
        cursor = end;
    }
    if cursor != blob.len() as u64 {
        return Err(integrity(WEIGHTS_FILE, format!("{} trailing bytes", blob.len() as u64 - cursor)));
    }
    let mut it = loaded.into_iter();
    model.visit_mut("", &mut |_, t| *t = it.next().expect("one tensor per entry"));
    Ok((model, manifest.step))
}
