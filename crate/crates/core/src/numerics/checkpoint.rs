//! Checkpoint files: a JSON manifest naming every parameter with its shape and byte
//! offset, next to a flat little-endian f64 blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "portrait-field-checkpoint";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub params: Vec<ParamEntry>,
    /// Free-form model description needed to rebuild the parameter layout.
    #[serde(default)]
    pub model: serde_json::Value,
}

impl Manifest {
    pub fn has_param_prefix(&self, prefix: &str) -> bool {
        self.params.iter().any(|p| p.name.starts_with(prefix))
    }
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn save(path: &Path, store: &ParamStore, model: serde_json::Value) -> Result<Manifest> {
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        params,
        model,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Validation(format!(
            "{}: not a checkpoint manifest (format `{}`)",
            path.display(),
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Load every manifest entry as `(name, tensor)` in manifest order.
pub fn load(path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let manifest = read_manifest(path)?;
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut out = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + count * 8;
        if end > bytes.len() {
            return Err(Error::Validation(format!(
                "parameter `{}` extends past the end of {}",
                entry.name,
                blob.display()
            )));
        }
        let data = bytes[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((manifest, out))
}

/// Overwrite the values of `store` from a checkpoint. Names and shapes must match exactly.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<Manifest> {
    let (manifest, tensors) = load(path)?;
    if tensors.len() != store.len() {
        return Err(Error::Validation(format!(
            "checkpoint holds {} parameters, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, tensor) in tensors {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Validation(format!("unexpected parameter `{name}` in checkpoint")))?;
        let p = store.get_mut(id);
        if p.value.shape() != tensor.shape() {
            return Err(Error::Validation(format!(
                "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = tensor;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut store = ParamStore::new();
            store.add("a", Tensor::new(vec![split], values[..split].to_vec()).unwrap()).unwrap();
            store.add("b.c", Tensor::new(vec![1, values.len() - split], values[split..].to_vec()).unwrap()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ckpt.json");
            save(&path, &store, serde_json::json!({"k": 1})).unwrap();
            let mut other = store.clone();
            for p in other.params_mut() {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            load_into(&path, &mut other).unwrap();
            for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
                let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn manifest_records_offsets() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros(&[2, 3])).unwrap();
        store.add("y", Tensor::zeros(&[4])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save(&dir.path().join("m.json"), &store, serde_json::Value::Null).unwrap();
        assert_eq!(m.params[0].offset, 0);
        assert_eq!(m.params[1].offset, 48);
        assert_eq!(m.blob, "m.bin");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros(&[2, 3])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save(&path, &store, serde_json::Value::Null).unwrap();
        let mut other = ParamStore::new();
        other.add("x", Tensor::zeros(&[3, 2])).unwrap();
        assert!(load_into(&path, &mut other).is_err());
    }
}
