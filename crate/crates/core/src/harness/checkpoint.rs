//! Checkpoint directories: `manifest.json` plus a little-endian f32 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// `detector` or `descriptor`.
    pub kind: String,
    pub step: usize,
    pub config_hash: String,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore, kind: &str, step: usize, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ForgeError::io(format!("creating {}", dir.display()), e))?;
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    let mut params = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        params.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: blob.len() });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        step,
        config_hash: config_hash.to_string(),
        params,
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| ForgeError::io(format!("writing {}", p.display()), e))
    };
    write(BLOB_FILE, &blob)?;
    write(MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

/// Reads a checkpoint into a fresh store holding exactly its parameters.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(ForgeError::MissingCheckpoint(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| ForgeError::io(format!("reading {}", mpath.display()), e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ForgeError::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| ForgeError::io(format!("reading {}", bpath.display()), e))?;
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let end = p.offset + 4 * n;
        if end > blob.len() {
            return Err(ForgeError::Checkpoint(format!("parameter {} runs past the blob", p.name)));
        }
        let data =
            blob[p.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        store.insert(p.name.clone(), Tensor::new(&p.shape, data));
    }
    Ok((manifest, store))
}

/// Loads a checkpoint of the given kind into an already built model store.
pub fn restore_into(dir: &Path, kind: &str, store: &mut ParamStore) -> Result<CheckpointManifest> {
    let (manifest, loaded) = load_checkpoint(dir)?;
    if manifest.kind != kind {
        return Err(ForgeError::Checkpoint(format!("expected a {kind} checkpoint, found {}", manifest.kind)));
    }
    store.load_from(&loaded).map_err(ForgeError::Checkpoint)?;
    Ok(manifest)
}
