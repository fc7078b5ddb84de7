//! Flat named-tensor archives.
//!
//! An archive is a safetensors file: the header doubles as the shape
//! manifest, and the string metadata carries a SHA-256 content hash plus
//! arbitrary caller fields (config JSON, provenance, optimizer step).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONTENT_HASH_KEY: &str = "content_sha256";

#[derive(Debug, Clone)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

fn to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

/// Hash of names, shapes and f32 payloads in name order.
pub fn content_hash<'a>(items: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (name, shape, bytes) in items {
        h.update(name.as_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

impl Archive {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), metadata: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn with_meta(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.metadata.insert(k.into(), v.into());
        self
    }

    pub fn meta(&self, k: &str) -> Option<&str> {
        self.metadata.get(k).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payloads = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            payloads.push((name.clone(), t.dims().to_vec(), to_bytes(t)?));
        }
        let hash = content_hash(payloads.iter().map(|(n, s, b)| (n.as_str(), s.as_slice(), b.as_slice())));
        let mut meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        meta.insert(CONTENT_HASH_KEY.into(), hash);
        let views = payloads
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.clone(), v)).map_err(|e| Error::Archive(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(format!("{what}: {e}")))?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Archive(format!("{what}: {e}")))?;
        let mut metadata: BTreeMap<String, String> =
            header.metadata().clone().unwrap_or_default().into_iter().collect();
        let stored = metadata.remove(CONTENT_HASH_KEY);
        let mut names: Vec<String> = st.names().into_iter().map(|s| s.to_string()).collect();
        names.sort();
        let mut tensors = BTreeMap::new();
        let mut payloads = Vec::new();
        for name in names {
            let view = st.tensor(&name).map_err(|e| Error::Archive(e.to_string()))?;
            if view.dtype() != Dtype::F32 {
                return Err(Error::Archive(format!("{what}: `{name}` is {:?}, expected F32", view.dtype())));
            }
            let data: Vec<f32> =
                view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.insert(name.clone(), Tensor::from_vec(data, view.shape(), &Device::Cpu)?);
            payloads.push((name, view.shape().to_vec(), view.data().to_vec()));
        }
        let computed = content_hash(payloads.iter().map(|(n, s, b)| (n.as_str(), s.as_slice(), b.as_slice())));
        match stored {
            Some(s) if s != computed => {
                return Err(Error::ChecksumMismatch { what: what.to_string(), stored: s, computed });
            }
            None => return Err(Error::Archive(format!("{what}: missing {CONTENT_HASH_KEY}"))),
            _ => {}
        }
        Ok(Self { tensors, metadata })
    }

    /// Write to `path` through a sibling temp file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::util::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Tensors under `prefix.`, with the prefix stripped. An empty prefix
    /// selects everything.
    pub fn scoped(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = if prefix.is_empty() { String::new() } else { format!("{prefix}.") };
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}

impl Default for Archive {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_tensors_and_metadata() {
        let mut a = Archive::new().with_meta("kind", "test");
        a.insert("x.w", Tensor::new(&[[1f32, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap());
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(b.meta("kind"), Some("test"));
        assert_eq!(b.tensors["x.w"].to_vec2::<f32>().unwrap(), vec![vec![1., 2.], vec![3., 4.]]);
        assert_eq!(b.scoped("x").len(), 1);
    }

    #[test]
    fn tampered_payload_is_detected() {
        let mut a = Archive::new();
        a.insert("w", Tensor::new(&[1f32, 2.0, 3.0], &Device::Cpu).unwrap());
        let mut bytes = a.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        assert!(matches!(Archive::from_bytes(&bytes, "mem"), Err(Error::ChecksumMismatch { .. })));
    }
}
