//! Checkpoints: one little-endian `f64` blob holding every tensor back to back,
//! plus a JSON manifest naming each tensor's shape and byte offset.
//!
//! `save(dir/name.json)` also writes `dir/name.bin`; the manifest refers to
//! the blob by file name so the pair can be moved together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mim_core::arch::{MimConfig, MimModel};
use mim_core::params::{ParamKind, ParamStore};
use mim_core::Tensor;

use crate::error::{Error, Result};
use crate::SCHEMA_VERSION;

pub const FORMAT: &str = "mim-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub schema_version: u32,
    pub byte_order: String,
    pub blob: String,
    pub blob_bytes: usize,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
    pub model: MimConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn save(manifest_path: &Path, store: &ParamStore, model: &MimConfig, step: usize) -> Result<Manifest> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for e in store.entries() {
        let offset = blob.len();
        for v in e.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: e.name.clone(),
            kind: e.kind,
            shape: e.value.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let blob_file = blob_path(manifest_path);
    let manifest = Manifest {
        format: FORMAT.into(),
        schema_version: SCHEMA_VERSION,
        byte_order: "little".into(),
        blob: blob_file.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
        blob_bytes: blob.len(),
        step,
        model: model.clone(),
        tensors,
    };
    std::fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    crate::write_json(manifest_path, &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(manifest_path: &Path) -> Result<Manifest> {
    let m: Manifest = crate::read_json(manifest_path)?;
    if m.format != FORMAT || m.byte_order != "little" {
        return Err(Error::format(manifest_path, format!("not a {FORMAT} manifest")));
    }
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::format(
            manifest_path,
            format!("schema version {} (expected {SCHEMA_VERSION})", m.schema_version),
        ));
    }
    Ok(m)
}

/// Rebuilds the network described by the manifest and fills every tensor
/// from the blob. Tensors missing from either side, or differing in shape,
/// are an error.
pub fn load(manifest_path: &Path) -> Result<(MimModel, ParamStore, Manifest)> {
    let manifest = read_manifest(manifest_path)?;
    let (model, mut store) = MimModel::init(&manifest.model, 0)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let blob_file = dir.join(&manifest.blob);
    let blob = std::fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::format(&blob_file, format!("{} bytes, manifest says {}", blob.len(), manifest.blob_bytes)));
    }
    if manifest.tensors.len() != store.len() {
        return Err(Error::Mismatch(format!(
            "checkpoint has {} tensors, network has {}",
            manifest.tensors.len(),
            store.len()
        )));
    }
    for t in &manifest.tensors {
        let id = store.id(&t.name).ok_or_else(|| Error::Mismatch(format!("unknown tensor {}", t.name)))?;
        let expected = store.value(id).shape().to_vec();
        if t.shape != expected || t.kind != store.get(id).kind {
            return Err(Error::Mismatch(format!("{}: {:?} in checkpoint, {:?} in network", t.name, t.shape, expected)));
        }
        let numel: usize = t.shape.iter().product();
        if t.dtype != "f64" || t.bytes != numel * 8 || t.offset + t.bytes > blob.len() {
            return Err(Error::format(manifest_path, format!("bad extent for {}", t.name)));
        }
        let data = blob[t.offset..t.offset + t.bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.set(id, Tensor::new(t.shape.clone(), data)?)?;
    }
    Ok((model, store, manifest))
}

/// Fails unless `cfg` describes the same network as the checkpoint.
pub fn ensure_matches(manifest: &Manifest, cfg: &MimConfig) -> Result<()> {
    if &manifest.model != cfg {
        return Err(Error::Mismatch("model config differs from the checkpoint's".into()));
    }
    Ok(())
}
