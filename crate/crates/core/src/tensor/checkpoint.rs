//! Tensor container: UTF-8 JSON header, a NUL byte, then little-endian f64 payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "glvd-tensors-v1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Number of f64 values.
    pub len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    fingerprint: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory form of one container file.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub fingerprint: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        TensorFile {
            fingerprint: fingerprint.into(),
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += 8 * t.numel();
        }
        let header = Header {
            format: FORMAT_TAG.to_string(),
            fingerprint: self.fingerprint.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(0);
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |detail: String| Error::Corrupt {
            path: path.to_path_buf(),
            detail,
        };
        let nul = bytes
            .iter()
            .position(|b| *b == 0)
            .ok_or_else(|| corrupt("no header separator".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nul])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(corrupt(format!("unknown format `{}`", header.format)));
        }
        let payload = &bytes[nul + 1..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if n != e.len {
                return Err(corrupt(format!("`{}` shape {:?} disagrees with len {}", e.name, e.shape, e.len)));
            }
            let end = e.offset.checked_add(8 * e.len).filter(|end| *end <= payload.len());
            let Some(end) = end else {
                return Err(corrupt(format!("`{}` runs past the payload", e.name)));
            };
            let data: Vec<f64> = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(corrupt(format!("`{}` holds non-finite values", e.name)));
            }
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(TensorFile {
            fingerprint: header.fingerprint,
            meta: header.meta,
            tensors,
        })
    }
}

pub fn write_tensor_file(path: &Path, file: &TensorFile) -> Result<()> {
    let bytes = file.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a container; a non-`None` `expected` fingerprint must match exactly.
pub fn read_tensor_file(path: &Path, expected: Option<&str>) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = TensorFile::from_bytes(&bytes, path)?;
    if let Some(exp) = expected {
        if file.fingerprint != exp {
            return Err(Error::Fingerprint {
                expected: exp.to_string(),
                found: file.fingerprint,
            });
        }
    }
    Ok(file)
}
