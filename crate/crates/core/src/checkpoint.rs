//! Directory checkpoints: a JSON manifest plus one little-endian binary32
//! file per named tensor, each content-hashed.

use std::fs;
use std::path::Path;

use mvgr_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "mvgr-tensors/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub meta: serde_json::Value,
    pub components: Vec<ComponentEntry>,
    /// Hash over the component hashes in order.
    pub content_hash: String,
}

pub fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn f32_values(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Integrity(format!("binary32 payload of {} bytes is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

/// Rounds every entry through `f32`, the precision stored on disk.
pub fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| f64::from(v as f32))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn combined_hash(components: &[ComponentEntry]) -> String {
    let mut h = Sha256::new();
    for c in components {
        h.update(c.name.as_bytes());
        h.update([0]);
        h.update(c.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

fn file_name(name: &str) -> Result<String> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-')) {
        return Err(Error::Invalid(format!("tensor name `{name}` cannot be used as a file name")));
    }
    Ok(format!("{name}.f32"))
}

/// Manifest for `tensors` without writing anything.
pub fn manifest_for(meta: serde_json::Value, tensors: &[(String, Tensor)]) -> Result<Manifest> {
    let mut components = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        components.push(ComponentEntry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            file: file_name(name)?,
            sha256: sha256_hex(&f32_bytes(t.data())),
        });
    }
    Ok(Manifest {
        format: FORMAT.into(),
        content_hash: combined_hash(&components),
        meta,
        components,
    })
}

pub fn save_tensors(dir: &Path, meta: serde_json::Value, tensors: &[(String, Tensor)]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = manifest_for(meta, tensors)?;
    for ((_, t), c) in tensors.iter().zip(&manifest.components) {
        let path = dir.join(&c.file);
        fs::write(&path, f32_bytes(t.data())).map_err(io_err(&path))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("no checkpoint manifest at {}", path.display())));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Integrity(format!("{}: unsupported format `{}`", path.display(), m.format)));
    }
    Ok(m)
}

/// Loads and verifies every component against its recorded hash.
pub fn load_tensors(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let m = read_manifest(dir)?;
    let mut out = Vec::with_capacity(m.components.len());
    for c in &m.components {
        let path = dir.join(&c.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let got = sha256_hex(&bytes);
        if got != c.sha256 {
            return Err(Error::Integrity(format!(
                "{}: sha256 {got} does not match manifest {}",
                path.display(),
                c.sha256
            )));
        }
        let values = f32_values(&bytes)?;
        if values.len() != c.rows * c.cols {
            return Err(Error::Integrity(format!("{}: {} values for a {}x{} tensor", path.display(), values.len(), c.rows, c.cols)));
        }
        out.push((c.name.clone(), Tensor::matrix(c.rows, c.cols, values)));
    }
    if combined_hash(&m.components) != m.content_hash {
        return Err(Error::Integrity(format!("{}: content hash mismatch", dir.display())));
    }
    Ok((m, out))
}

/// All parameters of `store` in insertion order.
pub fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect()
}

/// Overwrites parameters of `store` with same-named tensors from a checkpoint.
pub fn restore_into(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in tensors {
        let id = store.id(name)?;
        store.set(id, t.clone())?;
    }
    Ok(())
}
