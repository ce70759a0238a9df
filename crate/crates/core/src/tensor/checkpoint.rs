//! Parameter checkpoint container.
//!
//! Layout: magic `CUN1`, u32 parameter count, then a manifest of
//! (name, 4-extent shape) records, then for each parameter in manifest
//! order the raw little-endian f64 values followed by the raw
//! little-endian f64 momentum buffer. Round-trips are byte-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::optim::ParamSet;
use super::Tensor;

const MAGIC: &[u8; 4] = b"CUN1";

struct Reader<'a> {
    buf: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, offset: 0 }
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.offset as u64, reason: reason.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.buf.len() {
            return self.fail(format!(
                "truncated: wanted {} bytes, {} remain",
                n,
                self.buf.len() - self.offset
            ));
        }
        let s = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}

impl ParamSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            for d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for e in &self.entries {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &e.momentum {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<ParamSet> {
        let mut r = Reader::new(buf);
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, reason: format!("bad magic {magic:?}, expected CUN1") });
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_bytes = r.take(name_len)?;
            let name = match std::str::from_utf8(name_bytes) {
                Ok(s) => s.to_string(),
                Err(_) => return r.fail("parameter name is not UTF-8"),
            };
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            manifest.push((name, shape));
        }
        let mut set = ParamSet::new();
        for (name, shape) in manifest {
            let numel: usize = shape.iter().product();
            let values = r.f64_vec(numel)?;
            let momentum = r.f64_vec(numel)?;
            if set.contains(&name) {
                return r.fail(format!("duplicate parameter {name:?} in manifest"));
            }
            set.insert(name.clone(), Tensor::new(shape, values));
            let idx = set.entries.len() - 1;
            set.entries[idx].momentum = momentum;
        }
        if r.offset != buf.len() {
            return r.fail(format!("{} trailing bytes after payload", buf.len() - r.offset));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
        let buf = fs::read(path.as_ref())?;
        ParamSet::from_bytes(&buf)
    }
}
