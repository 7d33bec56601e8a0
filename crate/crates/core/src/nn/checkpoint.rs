//! Versioned checkpoint container.
//!
//! ```text
//! b"FGCK" | u32 LE version | u64 LE header length | header JSON | f64 LE data...
//! ```
//!
//! The header names every tensor and its shape in declaration order; the data
//! section is the concatenation of the tensors in that order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub precision: String,
    pub kind: String,
    #[serde(default)]
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, meta: Value, store: &ParamStore) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            precision: "f64".to_string(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.precision != "f64" {
            return Err(Error::Checkpoint(format!("unsupported precision {}", header.precision)));
        }
        let mut off = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes.get(off..off + 8 * n).ok_or_else(|| bad("truncated data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
            off += 8 * n;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copy values into a store whose parameters were declared identically.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in checkpoint, {} parameters declared",
                self.tensors.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for ((name, t), id) in self.tensors.iter().zip(ids) {
            let p = store.param(id);
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {} {:?}, found {name} {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_input_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let bytes = Checkpoint::from_store("t", Value::Null, &store).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }

    #[test]
    fn restore_checks_names() {
        let mut a = ParamStore::new();
        a.add("a", Tensor::zeros(&[2]));
        let ck = Checkpoint::from_store("t", Value::Null, &a);
        let mut b = ParamStore::new();
        b.add("b", Tensor::zeros(&[2]));
        assert!(ck.restore_into(&mut b).is_err());
    }
}
