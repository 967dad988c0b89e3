//! Checkpoint format: `manifest.json` listing every tensor (name, shape,
//! dtype, byte offset, byte length) plus `tensors.bin`, one little-endian
//! flat blob in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, f64s_to_le_bytes, le_bytes_to_f64s, read_json, sha256_hex, write_json};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
pub const FORMAT: &str = "xmodal-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// SHA-256 of the blob; doubles as the checkpoint id.
    pub checksum: String,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn id(&self) -> &str {
        &self.checksum[..16.min(self.checksum.len())]
    }
}

pub fn encode(store: &ParamStore) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let bytes = f64s_to_le_bytes(t.data());
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len() as u64,
            bytes: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        checksum: sha256_hex(&blob),
        tensors,
    };
    (manifest, blob)
}

pub fn save(store: &ParamStore, dir: &Path) -> Result<Manifest> {
    let (manifest, blob) = encode(store);
    atomic_write(&dir.join(BLOB_FILE), &blob)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<ParamStore> {
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {}", manifest.format)));
    }
    if sha256_hex(blob) != manifest.checksum {
        return Err(Error::Checkpoint("blob checksum does not match manifest".into()));
    }
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor {}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let end = e.offset.checked_add(e.bytes).filter(|&end| end as usize <= blob.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("tensor {} runs past the blob", e.name)));
        };
        let data = le_bytes_to_f64s(&blob[e.offset as usize..end as usize])?;
        let t =
            Tensor::new(e.shape.clone(), data).map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        store.add(e.name.clone(), t)?;
    }
    Ok(store)
}

pub fn load(dir: &Path) -> Result<ParamStore> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(BLOB_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode(&manifest, &blob)
}

/// Copies every tensor of `src` into `dst`, which must hold exactly the same
/// names and shapes.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    for (name, t) in src.iter() {
        let target = dst
            .by_name_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("model has no tensor named {name}")))?;
        if target.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
