//! Self-describing array container used for checkpoints and activation maps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "CGCAMBIN"
//! offset 8   u32       format version (1)
//! offset 12  u64       header length H in bytes
//! offset 20  H bytes   UTF-8 JSON header {"meta": {...}, "arrays": [ArrayEntry, ...]}
//! offset 20+H          payload: arrays back to back, row-major, f32 or f64
//! ```
//!
//! `ArrayEntry.offset` is relative to the start of the payload.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CGCAMBIN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Named arrays plus free-form JSON metadata.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, array: ArrayViewD<'_, f64>) {
        self.arrays.push((name.into(), array.to_owned()));
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format(format!("container has no array {name:?}")))
    }

    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut payload = Vec::new();
        for (name, a) in &self.arrays {
            let start = payload.len() as u64;
            for v in a.iter() {
                match dtype {
                    DType::F32 => payload.extend_from_slice(&(*v as f32).to_le_bytes()),
                    DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype,
                shape: a.shape().to_vec(),
                offset: start,
                len_bytes: payload.len() as u64 - start,
            });
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a CGCAMBIN container".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated container header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        let payload = &bytes[header_end..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let count: usize = e.shape.iter().product();
            let w = e.dtype.width();
            let start = e.offset as usize;
            let end = start + count * w;
            if e.len_bytes as usize != count * w || end > payload.len() {
                return Err(Error::Format(format!("array {:?} is truncated", e.name)));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(w)
                .map(|c| match e.dtype {
                    DType::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                    DType::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                })
                .collect();
            let a = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
                .map_err(|err| Error::Format(format!("array {:?}: {err}", e.name)))?;
            arrays.push((e.name, a));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path, dtype: DType) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes(dtype)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_round_trip_is_exact(values in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let n = values.len();
            let mut c = Container::new(serde_json::json!({"k": n}));
            c.push("a", Array::from_vec(values.clone()).into_dyn().view());
            let back = Container::from_bytes(&c.to_bytes(DType::F64).unwrap()).unwrap();
            prop_assert_eq!(back.get("a").unwrap().as_slice().unwrap(), &values[..]);
            prop_assert_eq!(back.meta, serde_json::json!({"k": n}));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::from_bytes(b"nope").is_err());
        let mut c = Container::new(serde_json::Value::Null);
        c.push("x", Array::from_elem(IxDyn(&[3]), 1.0).view());
        let mut bytes = c.to_bytes(DType::F32).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(Container::from_bytes(&bytes).is_err());
    }
}
