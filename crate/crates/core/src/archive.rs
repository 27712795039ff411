//! A small portable container of named `f64` arrays plus string metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "SLMARRAY"
//! version    u32
//! n_meta     u32       then n_meta × { u32 len, key utf8, u32 len, value utf8 }
//! n_arrays   u32       then n_arrays × { u32 len, name utf8, u32 ndim, ndim × u64 dim, f64 data }
//! ```
//!
//! Entries are written in key order, so equal archives serialize to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SLMARRAY";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayArchive {
    pub metadata: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, ArrayD<f64>>,
}

impl ArrayArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f64>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Archive(format!("missing metadata key `{key}`")))
    }

    pub fn array(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing array `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, array) in &self.arrays {
            write_str(&mut out, name);
            out.extend_from_slice(&(array.ndim() as u32).to_le_bytes());
            for &d in array.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in array.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Archive(format!(
                "unsupported archive version {version} (expected {ARCHIVE_VERSION})"
            )));
        }
        let mut archive = ArrayArchive::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            archive.metadata.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            let array = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Archive(e.to_string()))?;
            archive.arrays.insert(name, array);
        }
        if r.pos != bytes.len() {
            return Err(Error::Archive("trailing bytes".into()));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Archive("truncated archive".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Archive(e.to_string()))
    }
}
