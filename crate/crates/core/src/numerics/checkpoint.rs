//! Checkpoint persistence: a human-readable JSON manifest (tensor names,
//! shapes, dtype, byte offsets, checksums) plus one binary blob of
//! little-endian IEEE-754 values in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{Dtype, Real, Tensor};
use crate::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    store: String,
    tensor: String,
    rows: usize,
    cols: usize,
    dtype: String,
    offset: u64,
    byte_len: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    entries: Vec<ManifestEntry>,
    blob_sha256: String,
}

pub fn manifest_path(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn blob_path(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".blob");
    PathBuf::from(s)
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Serialize stores to `<base>.manifest.json` + `<base>.blob`.
/// Round trips are bit-exact.
pub fn save_checkpoint<S: Real>(
    stores: &BTreeMap<String, ParamStore<S>>,
    base: &Path,
) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (store_name, store) in stores {
        for (tensor_name, t) in store.iter() {
            let offset = blob.len() as u64;
            let start = blob.len();
            for &x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes_vec());
            }
            entries.push(ManifestEntry {
                store: store_name.clone(),
                tensor: tensor_name.clone(),
                rows: t.rows(),
                cols: t.cols(),
                dtype: S::DTYPE.as_str().to_string(),
                offset,
                byte_len: (blob.len() - start) as u64,
                sha256: sha256_hex(&blob[start..]),
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        entries,
        blob_sha256: sha256_hex(&blob),
    };
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(blob_path(base), &blob)?;
    fs::write(
        manifest_path(base),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Internal(format!("manifest serialization: {e}")))?,
    )?;
    Ok(())
}

/// Load a checkpoint; any inconsistency (corrupt manifest, checksum or shape
/// mismatch, offsets outside the blob) fails without returning partial state.
pub fn load_checkpoint<S: Real>(base: &Path) -> Result<BTreeMap<String, ParamStore<S>>> {
    let manifest_text = fs::read_to_string(manifest_path(base))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::CheckpointFormat(format!("corrupt manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let blob = fs::read(blob_path(base))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::CheckpointFormat("blob checksum mismatch".into()));
    }
    let mut out: BTreeMap<String, ParamStore<S>> = BTreeMap::new();
    let mut expected_offset = 0u64;
    for e in &manifest.entries {
        let dtype = Dtype::parse(&e.dtype)?;
        if dtype != S::DTYPE {
            return Err(Error::CheckpointFormat(format!(
                "tensor {}/{} has dtype {}, expected {}",
                e.store,
                e.tensor,
                e.dtype,
                S::DTYPE.as_str()
            )));
        }
        if e.offset != expected_offset {
            return Err(Error::CheckpointFormat(format!(
                "tensor {}/{} offset {} does not match expected {}",
                e.store, e.tensor, e.offset, expected_offset
            )));
        }
        let width = dtype.byte_width();
        let want_len = (e.rows * e.cols * width) as u64;
        if e.byte_len != want_len {
            return Err(Error::CheckpointFormat(format!(
                "tensor {}/{} byte length {} does not match shape {}x{}",
                e.store, e.tensor, e.byte_len, e.rows, e.cols
            )));
        }
        let start = e.offset as usize;
        let end = start + e.byte_len as usize;
        if end > blob.len() {
            return Err(Error::CheckpointFormat(format!(
                "tensor {}/{} extends past end of blob",
                e.store, e.tensor
            )));
        }
        let bytes = &blob[start..end];
        if sha256_hex(bytes) != e.sha256 {
            return Err(Error::CheckpointFormat(format!(
                "tensor {}/{} checksum mismatch",
                e.store, e.tensor
            )));
        }
        let data: Vec<S> = bytes
            .chunks_exact(width)
            .map(|c| S::from_le_slice(c))
            .collect();
        let tensor = Tensor::from_vec(e.rows, e.cols, data);
        out.entry(e.store.clone())
            .or_default()
            .insert(&e.tensor, tensor)?;
        expected_offset = end as u64;
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::CheckpointFormat(
            "blob has trailing bytes not covered by the manifest".into(),
        ));
    }
    Ok(out)
}
