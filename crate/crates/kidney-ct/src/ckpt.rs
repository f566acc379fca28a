//! Parameter serialization: a single binary container used for both
//! trained checkpoints and the pretrained weight store.
//!
//! Layout: magic, little-endian u64 header length, JSON header (param
//! names + shapes plus a free-form `meta` object), then the raw f32
//! little-endian tensors in header order. Writing the same parameters
//! twice produces identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::TensorD;

const MAGIC: &[u8; 8] = b"KCTBLOB1";

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    params: Vec<HeaderEntry>,
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone)]
pub struct ParamBlob {
    pub meta: serde_json::Value,
    pub entries: Vec<(String, TensorD)>,
}

impl ParamBlob {
    pub fn get(&self, name: &str) -> Option<&TensorD> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn write_blob(path: &Path, blob: &ParamBlob) -> Result<()> {
    let header = Header {
        meta: blob.meta.clone(),
        params: blob
            .entries
            .iter()
            .map(|(name, tensor)| HeaderEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_u64::<LittleEndian>(header_bytes.len() as u64)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
    for (_, tensor) in &blob.entries {
        let slice = tensor.as_slice().expect("params are contiguous");
        let mut bytes = Vec::with_capacity(slice.len() * 4);
        for v in slice {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<ParamBlob> {
    let mut file = fs::File::open(path).map_err(|_| Error::MissingCheckpoint(path.to_path_buf()))?;
    let corrupt = |reason: &str| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| corrupt("truncated magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let header_len = file
        .read_u64::<LittleEndian>()
        .map_err(|_| corrupt("truncated header length"))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|_| corrupt("unparsable header"))?;

    let mut entries = Vec::with_capacity(header.params.len());
    for entry in header.params {
        let len: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        file.read_exact(&mut bytes)
            .map_err(|_| corrupt(&format!("truncated tensor {}", entry.name)))?;
        let mut values = Vec::with_capacity(len);
        for chunk in bytes.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let tensor = TensorD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|_| corrupt(&format!("shape mismatch for {}", entry.name)))?;
        entries.push((entry.name, tensor));
    }
    Ok(ParamBlob {
        meta: header.meta,
        entries,
    })
}

pub fn sha256_hex_of_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable checksum of a parameter set or activation tensor, used by the
/// determinism tests and the ensemble provenance records.
pub fn tensor_checksum<'a>(tensors: impl Iterator<Item = &'a TensorD>) -> String {
    let mut hasher = Sha256::new();
    for tensor in tensors {
        for v in tensor.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_string(&hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_is_exact_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let blob = ParamBlob {
            meta: serde_json::json!({"kind": "test", "num_classes": 4}),
            entries: vec![
                (
                    "layer.weight".into(),
                    TensorD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -2.0, 0.25, 3.5, 0.0, -0.125])
                        .unwrap(),
                ),
                ("layer.bias".into(), TensorD::zeros(IxDyn(&[3]))),
            ],
        };
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        write_blob(&p1, &blob).unwrap();
        write_blob(&p2, &blob).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let loaded = read_blob(&p1).unwrap();
        assert_eq!(loaded.meta["num_classes"], 4);
        assert_eq!(loaded.entries.len(), 2);
        assert_eq!(loaded.get("layer.weight").unwrap(), blob.get("layer.weight").unwrap());
    }

    #[test]
    fn missing_and_corrupt_files_error_distinctly() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.bin");
        assert!(matches!(
            read_blob(&missing),
            Err(Error::MissingCheckpoint(_))
        ));

        let bad = dir.path().join("bad.bin");
        fs::write(&bad, b"definitely not a blob").unwrap();
        assert!(matches!(
            read_blob(&bad),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }
}
