//! Single-file checkpoint format.
//!
//! Layout: a little-endian u64 giving the JSON header length, the header
//! itself, then a contiguous little-endian f32 payload. The header lists
//! every tensor with its name, role (`value`, `adam_m`, `adam_v`), shape,
//! and byte offset into the payload. Files are written atomically via a
//! temporary sibling and rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::{Param, ParamStore};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "hdr-fusion/checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Writes the store, including optimizer state, as one file. Values are
/// stored as f32 regardless of the working precision.
pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, param) in store.iter() {
        for (role, array) in [("value", &param.value), ("adam_m", &param.m), ("adam_v", &param.v)] {
            tensors.push(TensorEntry {
                name: name.clone(),
                role: role.to_string(),
                dtype: "f32".to_string(),
                shape: array.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for v in array.data() {
                payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        step: store.step(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut blob = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    blob.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    blob.extend_from_slice(&header_bytes);
    blob.extend_from_slice(&payload);
    write_atomic(path, &blob)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>, CheckpointError> {
    let blob = fs::read(path)?;
    if blob.len() < 8 {
        return Err(CheckpointError::Malformed("file shorter than length prefix".into()));
    }
    let header_len = u64::from_le_bytes(blob[..8].try_into().expect("8 bytes")) as usize;
    let payload_start = 8 + header_len;
    if blob.len() < payload_start {
        return Err(CheckpointError::Malformed("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&blob[8..payload_start])?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Malformed(format!("unknown format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Malformed(format!("unsupported version {}", header.version)));
    }
    let payload = &blob[payload_start..];

    let mut store = ParamStore::new();
    // Group the role triple per name; missing optimizer state defaults to 0.
    let mut by_name: std::collections::BTreeMap<String, (Option<Array<T>>, Option<Array<T>>, Option<Array<T>>)> =
        Default::default();
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(CheckpointError::Malformed(format!(
                "tensor {:?}: unsupported dtype {:?}",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(CheckpointError::Malformed(format!(
                "tensor {:?} ({}) overruns payload",
                entry.name, entry.role
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in payload[start..end].chunks_exact(4) {
            let bits = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !bits.is_finite() {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {:?} ({}) contains a non-finite value",
                    entry.name, entry.role
                )));
            }
            data.push(T::cast(bits as f64));
        }
        let array = Array::from_vec(entry.shape.clone(), data);
        let slot = by_name.entry(entry.name.clone()).or_default();
        let field = match entry.role.as_str() {
            "value" => &mut slot.0,
            "adam_m" => &mut slot.1,
            "adam_v" => &mut slot.2,
            other => {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {:?}: unknown role {other:?}",
                    entry.name
                )))
            }
        };
        if field.is_some() {
            return Err(CheckpointError::Malformed(format!(
                "tensor {:?}: duplicate role {:?}",
                entry.name, entry.role
            )));
        }
        *field = Some(array);
    }
    for (name, (value, m, v)) in by_name {
        let value = value
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name:?} has no value entry")))?;
        let m = m.unwrap_or_else(|| Array::zeros(value.shape()));
        let v = v.unwrap_or_else(|| Array::zeros(value.shape()));
        if m.shape() != value.shape() || v.shape() != value.shape() {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name:?}: optimizer state shape differs from value"
            )));
        }
        store.insert_raw(name, Param { value, m, v });
    }
    store.set_step(header.step);
    Ok(store)
}

/// Writes bytes to a temporary sibling file, then renames into place so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp-{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or("dat"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample_store() -> ParamStore<f32> {
        let mut store = ParamStore::new();
        store.register("b/bias", Array::from_vec(vec![3], vec![0.5, -1.5, 2.0])).unwrap();
        store.register("a/weight", Array::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("a/weight".to_string(), Array::full(&[2, 2], 0.1));
        store.adam_step(&grads, &Default::default()).unwrap();
        store
    }

    #[test]
    fn round_trip_preserves_values_state_and_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        save_checkpoint(&path, &store).unwrap();
        let loaded: ParamStore<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step(), store.step());
        assert_eq!(loaded.len(), store.len());
        for (name, p) in store.iter() {
            let q = loaded.get(name).unwrap();
            assert_eq!(p.value.data(), q.value.data(), "{name} value");
            assert_eq!(p.m.data(), q.m.data(), "{name} m");
            assert_eq!(p.v.data(), q.v.data(), "{name} v");
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let store = sample_store();
        save_checkpoint(&p1, &store).unwrap();
        save_checkpoint(&p2, &store).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_store()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
