//! Binary container for named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..8    magic  b"USTCKPT\0"
//! 8..12   u32    format version
//! 12..20  u64    header length H in bytes
//! 20..20+H       UTF-8 JSON header
//! 20+H..         f64 payload, little-endian
//! ```
//!
//! The header is `{"format_version", "kind", "metadata", "tensors"}` where
//! `tensors` lists `{"name", "shape", "offset"}` with `offset` counted in
//! f64 elements from the start of the payload. `metadata` is free-form JSON
//! (the model configuration, trainer state, extractor descriptors...).
//! Object keys are emitted sorted, so identical content gives identical
//! bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, UstError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"USTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + hjson.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| UstError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(UstError::Checkpoint(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend])?;
        let payload = &bytes[hend..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(UstError::Checkpoint(format!("tensor `{}` runs past the payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
        }
        Ok(Container {
            kind: header.kind,
            metadata: header.metadata,
            tensors,
        })
    }

    /// Write via a temporary sibling file and rename, so a failed write never
    /// leaves a truncated container behind.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &bytes).map_err(|e| UstError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| UstError::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                UstError::MissingFile(path.to_path_buf())
            } else {
                UstError::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized container.
    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(&self.to_bytes()?))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut c = Container::new("model", serde_json::json!({"b": 1, "a": [1.5, 2.0]}));
        c.push("w", Tensor::new(&[2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.push("b", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((_, a), (_, b)) in c.tensors.iter().zip(&back.tensors) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(Container::from_bytes(b"PNG....................").is_err());
        let c = Container::new("x", serde_json::json!({}));
        let mut bytes = c.to_bytes().unwrap();
        bytes[8] = 99;
        assert!(matches!(Container::from_bytes(&bytes), Err(UstError::Checkpoint(_))));
        let mut c = Container::new("x", serde_json::json!({}));
        c.push("t", Tensor::zeros(&[4]));
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
