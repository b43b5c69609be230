//! Checkpoints: a JSON manifest next to a flat little-endian `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use ditto_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub format_version: u32,
    pub dtype: String,
    pub spec_hash: String,
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

/// `model.json` -> `model.bin`
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save(
    manifest_path: &Path,
    kind: &str,
    spec_hash: &str,
    meta: serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    let mut params = Vec::with_capacity(store.len());
    let mut blob = Vec::with_capacity(store.numel() * 4);
    let mut offset = 0;
    for (name, t) in store.iter() {
        params.push(ParamEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.numel();
    }
    let manifest = Manifest {
        kind: kind.to_owned(),
        format_version: FORMAT_VERSION,
        dtype: "f32-le".to_owned(),
        spec_hash: spec_hash.to_owned(),
        meta,
        params,
    };
    fsutil::write_atomic(&blob_path(manifest_path), &blob)?;
    fsutil::write_json(manifest_path, &manifest)
}

pub fn load(manifest_path: &Path, kind: &str) -> Result<(Manifest, ParamStore)> {
    let manifest: Manifest = fsutil::read_json(manifest_path)?;
    let bad = |message: String| Error::Checkpoint {
        path: manifest_path.to_owned(),
        message,
    };
    if manifest.kind != kind {
        return Err(bad(format!(
            "expected a {kind} checkpoint, found {}",
            manifest.kind
        )));
    }
    if manifest.format_version != FORMAT_VERSION || manifest.dtype != "f32-le" {
        return Err(bad("unsupported format version or dtype".into()));
    }
    let blob_file = blob_path(manifest_path);
    let bytes = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let data = values
            .get(p.offset..p.offset + n)
            .ok_or_else(|| bad(format!("parameter {} runs past the blob", p.name)))?;
        store.add(p.name.clone(), Tensor::new(p.shape.clone(), data.to_vec()));
    }
    if store.numel() * 4 != bytes.len() {
        return Err(bad("blob length does not match the parameter list".into()));
    }
    Ok((manifest, store))
}

/// Copies loaded parameters into a freshly built model store, checking that
/// names and shapes line up.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore, path: &Path) -> Result<()> {
    let names_match = target.len() == loaded.len()
        && target
            .iter()
            .zip(loaded.iter())
            .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
    if !names_match {
        return Err(Error::Checkpoint {
            path: path.to_owned(),
            message: "parameter layout does not match the architecture".into(),
        });
    }
    target.copy_from(loaded);
    Ok(())
}
