//! Versioned container of named arrays plus a JSON metadata header. Used for
//! checkpoints, sweep volumes and distribution dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MVSARC01"
//! meta_len   u32      length of the metadata JSON
//! meta       bytes    UTF-8 JSON object
//! count      u32      number of arrays
//! per array:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8       0 = f32, 1 = u8
//!   ndim     u8
//!   dims     u64 × ndim
//!   data     element bytes, row-major, f32 as IEEE-754 LE
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MVSARC01";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(shape: &[usize], data: Vec<f32>) -> Self {
        Self { shape: shape.to_vec(), data: ArrayData::F32(data) }
    }

    pub fn u8(shape: &[usize], data: Vec<u8>) -> Self {
        Self { shape: shape.to_vec(), data: ArrayData::U8(data) }
    }

    fn len(&self) -> usize {
        match &self.data {
            ArrayData::F32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub metadata: Value,
    pub arrays: BTreeMap<String, NamedArray>,
}

impl Archive {
    pub fn new(metadata: Value) -> Self {
        Self { metadata, arrays: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: NamedArray) {
        self.arrays.insert(name.into(), array);
    }

    pub fn get_f32(&self, name: &str, path: &Path) -> Result<(&[usize], &[f32])> {
        match self.arrays.get(name) {
            Some(NamedArray { shape, data: ArrayData::F32(v) }) => Ok((shape, v)),
            Some(_) => Err(Error::format(path, format!("array {name} is not f32"))),
            None => Err(Error::format(path, format!("missing array {name}"))),
        }
    }

    pub fn get_u8(&self, name: &str, path: &Path) -> Result<(&[usize], &[u8])> {
        match self.arrays.get(name) {
            Some(NamedArray { shape, data: ArrayData::U8(v) }) => Ok((shape, v)),
            Some(_) => Err(Error::format(path, format!("array {name} is not u8"))),
            None => Err(Error::format(path, format!("missing array {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values always serialize");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, arr) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match arr.data {
                ArrayData::F32(_) => 0,
                ArrayData::U8(_) => 1,
            });
            out.push(arr.shape.len() as u8);
            for &d in &arr.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &arr.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "bad magic, not an array archive"));
        }
        let meta_len = r.u32()? as usize;
        let metadata: Value = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        let count = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, "array name is not UTF-8"))?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::format(path, "dimension overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(path, "array size overflow"))?;
            let data = match dtype {
                0 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "array size overflow"))?)?;
                    ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                }
                1 => ArrayData::U8(r.take(n)?.to_vec()),
                other => return Err(Error::format(path, format!("unknown dtype {other}"))),
            };
            let arr = NamedArray { shape, data };
            debug_assert_eq!(arr.len(), n);
            arrays.insert(name, arr);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last array"));
        }
        Ok(Self { metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, "unexpected end of file"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
