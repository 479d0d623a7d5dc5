//! Two-part tensor container: a JSON header followed by a raw blob of
//! little-endian `f32` values.
//!
//! Layout: 8 bytes of little-endian header length, the JSON header, then the
//! blob. The header lists every array's name, shape and byte offset into the
//! blob in storage order, plus a format version and an arbitrary JSON
//! `config` echo. Roundtrips are bit-exact, which model serialization and
//! the float sidecars of attack/explanation stages both rely on.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// A parsed container: the config echo plus the named arrays in file order.
pub struct Loaded {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Loaded {
    /// Pulls one array out by name.
    pub fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Container {
                field: format!("params.{name}"),
                detail: "missing array".into(),
            })?;
        Ok(self.tensors.remove(pos).1)
    }
}

/// Writes `tensors` (in the given order) under `config` to `path`.
pub fn save(path: &Path, config: &serde_json::Value, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let mut params = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        params.push(ParamEntry {
            name: (*name).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        params,
    })?;

    let mut bytes = Vec::with_capacity(8 + header.len() + offset as usize);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a container back, validating the version, the offsets and the blob
/// length before materializing any tensor.
pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |field: &str, detail: String| Error::Container {
        field: field.into(),
        detail,
    };

    if bytes.len() < 8 {
        return Err(fail("header length", format!("file is {} bytes", bytes.len())));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte slice")) as usize;
    if bytes.len() - 8 < header_len {
        return Err(fail(
            "header length",
            format!("header claims {header_len} bytes, file has {}", bytes.len() - 8),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(fail(
            "format_version",
            format!("expected {FORMAT_VERSION}, found {}", header.format_version),
        ));
    }

    let blob = &bytes[8 + header_len..];
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(header.params.len());
    for (i, entry) in header.params.iter().enumerate() {
        if entry.offset != expected_offset {
            return Err(fail(
                &format!("params[{i}].offset"),
                format!("expected {expected_offset}, found {}", entry.offset),
            ));
        }
        let len: usize = entry.shape.iter().product();
        let nbytes = 4 * len;
        let start = entry.offset as usize;
        if blob.len() < start + nbytes {
            return Err(fail(
                &format!("params[{i}]"),
                format!(
                    "array '{}' needs bytes {start}..{} but blob has {}",
                    entry.name,
                    start + nbytes,
                    blob.len()
                ),
            ));
        }
        let data: Vec<f32> = blob[start..start + nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| {
            fail(&format!("params[{i}].shape"), e.to_string())
        })?;
        tensors.push((entry.name.clone(), tensor));
        expected_offset += nbytes as u64;
    }
    if blob.len() as u64 != expected_offset {
        return Err(fail(
            "blob",
            format!("expected {expected_offset} bytes, found {}", blob.len()),
        ));
    }
    Ok(Loaded {
        config: header.config,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample_tensors() -> Vec<(String, Tensor<f32>)> {
        vec![
            (
                "kernel".into(),
                Tensor::new(vec![2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 1e-40, 7.25, -3.5])
                    .unwrap(),
            ),
            ("bias".into(), Tensor::new(vec![2], vec![0.1, -0.2]).unwrap()),
        ]
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let tensors = sample_tensors();
        let refs: Vec<(&str, &Tensor<f32>)> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save(&path, &json!({"num_classes": 8}), &refs).unwrap();

        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config, json!({"num_classes": 8}));
        assert_eq!(loaded.tensors.len(), 2);
        for ((name, t), (lname, lt)) in tensors.iter().zip(&loaded.tensors) {
            assert_eq!(name, lname);
            assert_eq!(t.shape(), lt.shape());
            for (a, b) in t.data().iter().zip(lt.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn file_size_matches_element_recount() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let tensors = sample_tensors();
        let refs: Vec<(&str, &Tensor<f32>)> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save(&path, &serde_json::Value::Null, &refs).unwrap();

        let total_elems: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + header_len + 4 * total_elems);
    }

    #[test]
    fn truncated_files_are_rejected_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let tensors = sample_tensors();
        let refs: Vec<(&str, &Tensor<f32>)> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save(&path, &serde_json::Value::Null, &refs).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Cut in the middle of the blob, the header, and the length prefix.
        for cut in [bytes.len() - 5, 20, 3] {
            let truncated = dir.path().join("truncated.bin");
            std::fs::write(&truncated, &bytes[..cut]).unwrap();
            let err = load(&truncated).unwrap_err();
            assert!(matches!(err, Error::Container { .. } | Error::Json(_)), "{err}");
        }
    }

    #[test]
    fn bad_offset_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let header = serde_json::to_vec(&json!({
            "format_version": FORMAT_VERSION,
            "config": null,
            "params": [{"name": "w", "shape": [1], "offset": 12}],
        }))
        .unwrap();
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();

        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("params[0].offset"), "{err}");
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let header = serde_json::to_vec(&json!({
            "format_version": 99,
            "config": null,
            "params": [],
        }))
        .unwrap();
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(&header);
        std::fs::write(&path, bytes).unwrap();

        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("format_version"), "{err}");
    }

    #[test]
    fn take_pulls_arrays_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let tensors = sample_tensors();
        let refs: Vec<(&str, &Tensor<f32>)> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save(&path, &serde_json::Value::Null, &refs).unwrap();

        let mut loaded = load(&path).unwrap();
        assert_eq!(loaded.take("bias").unwrap().shape(), &[2]);
        let err = loaded.take("bias").unwrap_err();
        assert!(err.to_string().contains("missing array"), "{err}");
    }
}
