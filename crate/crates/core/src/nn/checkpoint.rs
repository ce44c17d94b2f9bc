//! Checkpoint persistence: `manifest.json` describing shapes and offsets plus
//! a little-endian f32 blob `weights.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into weights.bin in elements (4 bytes each).
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    total_len: usize,
    params: Vec<ManifestEntry>,
}

/// Write the store to `dir`. Values are rounded to f32; quantize the store
/// first if the in-memory model must keep matching the file.
pub fn save_params(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in store.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.len(),
        });
        for &v in tensor.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += tensor.len();
    }
    let manifest = Manifest {
        dtype: "f32".to_string(),
        total_len: offset,
        params: entries,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::Checkpoint(e.to_string()))?,
    )?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

/// Read a checkpoint back into a fresh store. The blob length must match the
/// manifest exactly.
pub fn load_params(dir: &Path) -> Result<ParamStore> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(CoreError::Checkpoint(format!(
            "missing {} in {}",
            MANIFEST_FILE,
            dir.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| CoreError::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.dtype != "f32" {
        return Err(CoreError::Checkpoint(format!(
            "unsupported dtype `{}`",
            manifest.dtype
        )));
    }
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    if blob.len() != manifest.total_len * 4 {
        return Err(CoreError::Checkpoint(format!(
            "weights.bin holds {} bytes, manifest declares {}",
            blob.len(),
            manifest.total_len * 4
        )));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        if entry.shape.iter().product::<usize>() != entry.len
            || (entry.offset + entry.len) * 4 > blob.len()
        {
            return Err(CoreError::Checkpoint(format!(
                "manifest entry `{}` is inconsistent",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(entry.len);
        for i in 0..entry.len {
            let at = (entry.offset + i) * 4;
            let bytes: [u8; 4] = blob[at..at + 4].try_into().unwrap();
            data.push(f32::from_le_bytes(bytes) as f64);
        }
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0]).unwrap())
            .unwrap();
        s.insert("b.bias", Tensor::from_vec(vec![4.25, -1.125])).unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact_after_quantization() {
        let mut store = sample_store();
        store.quantize_f32();
        let dir = tempfile::tempdir().unwrap();
        save_params(&store, dir.path()).unwrap();
        let loaded = load_params(dir.path()).unwrap();
        for (name, tensor) in store.iter() {
            assert_eq!(loaded.get(name).unwrap(), tensor, "param {name}");
        }
    }

    #[test]
    fn truncated_blob_is_an_integrity_error() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        save_params(&store, dir.path()).unwrap();
        let blob = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), &blob[..blob.len() - 4]).unwrap();
        let err = load_params(dir.path()).unwrap_err();
        assert!(matches!(err, CoreError::Checkpoint(_)), "{err}");
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_params(dir.path()),
            Err(CoreError::Checkpoint(_))
        ));
    }
}
