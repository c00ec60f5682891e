//! Flat binary checkpoint archive.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "SFCK" | version | entry count
//! per entry: name length | name (UTF-8) | rank | dims... | f32 LE values
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    entries: Vec<(String, Tensor<f32>)>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            version: FORMAT_VERSION,
            entries: Vec::new(),
        }
    }

    pub fn from_params(params: &ParamStore<f32>) -> Self {
        let mut ck = Self::new();
        for (_, name, value) in params.iter() {
            ck.entries.push((name.to_string(), value.clone()));
        }
        ck
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(TensorError::Checkpoint(format!("duplicate entry {name}")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `params` from the archive. Missing entries or
    /// shape disagreements are errors; extra archive entries are ignored.
    pub fn load_into(&self, params: &mut ParamStore<f32>) -> Result<()> {
        let index: HashMap<&str, &Tensor<f32>> =
            self.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let ids: Vec<_> = params.iter().map(|(id, name, _)| (id, name.to_string())).collect();
        for (id, name) in ids {
            let t = index
                .get(name.as_str())
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter {name}")))?;
            params.set(id, (*t).clone()).map_err(|_| {
                TensorError::Checkpoint(format!(
                    "shape mismatch for {name}: archive {:?}, model {:?}",
                    t.shape(),
                    params.get(id).shape()
                ))
            })?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Self {
            version,
            entries: Vec::with_capacity(count.min(1 << 16)),
        };
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| TensorError::Checkpoint(format!("entry name at byte {}: {e}", r.pos)))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| TensorError::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.push(name, Tensor::new(&shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            TensorError::Checkpoint(format!("truncated archive at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
