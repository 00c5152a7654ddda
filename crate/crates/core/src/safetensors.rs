//! Minimal safetensors reader/writer.
//!
//! File layout: an unsigned 64-bit little-endian header length, a UTF-8 JSON
//! header mapping tensor names to `{dtype, shape, data_offsets}`, then raw
//! tensor bytes at the declared offsets (relative to the end of the header).
//! Only F32 tensors are supported.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::Deserialize;

use crate::error::{Error, Result};

/// Refuse absurd header lengths before allocating.
const MAX_HEADER_BYTES: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct TensorMeta {
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte range within the data region (start, end).
    pub data_offsets: (u64, u64),
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (u64, u64),
}

/// An open safetensors file. Tensor data is read on demand so the whole file
/// is never held in memory at once.
pub struct SafetensorsFile {
    path: PathBuf,
    file: File,
    /// Offset of the data region from the start of the file.
    data_start: u64,
    data_len: u64,
    tensors: HashMap<String, TensorMeta>,
}

impl SafetensorsFile {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|_| Error::Checkpoint(format!("{}: too short for header", path.display())))?;
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > MAX_HEADER_BYTES || header_len + 8 > file_len {
            return Err(Error::Checkpoint(format!(
                "{}: header length {header_len} exceeds file size {file_len}",
                path.display()
            )));
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header)
            .map_err(|e| Error::io(path, e))?;
        let header = std::str::from_utf8(&header)
            .map_err(|_| Error::Checkpoint(format!("{}: header is not UTF-8", path.display())))?;
        let raw: HashMap<String, serde_json::Value> = serde_json::from_str(header)
            .map_err(|e| Error::Checkpoint(format!("{}: header JSON: {e}", path.display())))?;

        let data_start = 8 + header_len;
        let data_len = file_len - data_start;
        let mut tensors = HashMap::new();
        for (name, value) in raw {
            if name == "__metadata__" {
                continue;
            }
            let entry: RawEntry = serde_json::from_value(value).map_err(|e| {
                Error::Checkpoint(format!("{}: entry `{name}`: {e}", path.display()))
            })?;
            let (start, end) = entry.data_offsets;
            if start > end || end > data_len {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor `{name}` offsets ({start}, {end}) outside data region of {data_len} bytes",
                    path.display()
                )));
            }
            tensors.insert(
                name,
                TensorMeta {
                    dtype: entry.dtype,
                    shape: entry.shape,
                    data_offsets: (start, end),
                },
            );
        }
        Ok(SafetensorsFile {
            path: path.to_path_buf(),
            file,
            data_start,
            data_len,
            tensors,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.tensors.get(name)
    }

    /// Reads one F32 tensor. Validates dtype and byte count against the shape.
    pub fn read_f32(&mut self, name: &str) -> Result<ArrayD<f32>> {
        let meta = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?
            .clone();
        if meta.dtype != "F32" {
            return Err(Error::UnsupportedDtype {
                name: name.to_string(),
                dtype: meta.dtype,
            });
        }
        let count: usize = meta.shape.iter().product();
        let byte_len = (meta.data_offsets.1 - meta.data_offsets.0) as usize;
        if byte_len != count * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: tensor `{name}` has {byte_len} bytes for shape {:?}",
                self.path.display(),
                meta.shape
            )));
        }
        self.file
            .seek(SeekFrom::Start(self.data_start + meta.data_offsets.0))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut bytes = vec![0u8; byte_len];
        self.file
            .read_exact(&mut bytes)
            .map_err(|e| Error::io(&self.path, e))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&meta.shape), values)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))
    }

    pub fn data_len(&self) -> u64 {
        self.data_len
    }
}

/// Writes tensors in the given order; names must be unique.
pub fn write_safetensors(path: &Path, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, values) in tensors {
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                got: vec![values.len()],
            });
        }
        let len = (values.len() * 4) as u64;
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        entries.push(format!(
            "\"{}\":{{\"dtype\":\"F32\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
            name,
            dims.join(","),
            offset,
            offset + len
        ));
        offset += len;
    }
    let header = format!("{{{}}}", entries.join(","));

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&(header.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(header.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    for (_, _, values) in tensors {
        for v in values {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let a = (0..6).map(|i| i as f32).collect::<Vec<_>>();
        let b = vec![1.5f32];
        write_safetensors(
            &path,
            &[
                ("a".into(), vec![2, 3], a.clone()),
                ("b".into(), vec![1], b.clone()),
            ],
        )
        .unwrap();
        let mut f = SafetensorsFile::open(&path).unwrap();
        let ra = f.read_f32("a").unwrap();
        assert_eq!(ra.shape(), &[2, 3]);
        assert_eq!(ra.as_slice().unwrap(), &a[..]);
        let rb = f.read_f32("b").unwrap();
        assert_eq!(rb.as_slice().unwrap(), &b[..]);
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        write_safetensors(&path, &[("a".into(), vec![1], vec![0.0])]).unwrap();
        let mut f = SafetensorsFile::open(&path).unwrap();
        assert!(matches!(f.read_f32("zz"), Err(Error::MissingTensor(_))));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        write_safetensors(&path, &[("a".into(), vec![4], vec![0.0; 4])]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(SafetensorsFile::open(&path).is_err());
    }

    #[test]
    fn rejects_oversized_header_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let mut bytes = u64::MAX.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            SafetensorsFile::open(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
