//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "GLITRCK1"
//! count    u32
//! count x  { name_len u32, name utf-8, dtype u8 (0 = f32, 1 = f64),
//!            ndim u32, dims u64 x ndim }
//! data     each tensor's values in header order, row-major
//! ```

use std::fs;
use std::path::Path;

use glitr_substrate::{DType, Real, Tensor};

use crate::error::{GlitrError, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"GLITRCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64.
    pub values: Vec<f64>,
}

pub fn encode<R: Real>(store: &ParamStore<R>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(R::DTYPE.code());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, p) in store.iter() {
        for &v in p.value.data() {
            match R::DTYPE {
                DType::F32 => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(GlitrError::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(GlitrError::Checkpoint("bad magic".into()));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| GlitrError::Checkpoint("name is not utf-8".into()))?;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| GlitrError::Checkpoint(format!("{name}: unknown dtype {code}")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        entries.push(Entry {
            name,
            dtype,
            shape,
            values: Vec::new(),
        });
    }
    for e in entries.iter_mut() {
        let n: usize = e.shape.iter().product();
        e.values = match e.dtype {
            DType::F32 => r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => r
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
    }
    if r.at != buf.len() {
        return Err(GlitrError::Checkpoint(format!("{} trailing bytes", buf.len() - r.at)));
    }
    Ok(entries)
}

pub fn save<R: Real>(store: &ParamStore<R>, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| GlitrError::io(path, e))
}

/// Overwrites every parameter of `store` from the file, matching by name
/// and shape. Extra or missing names are errors.
pub fn load_into<R: Real>(store: &mut ParamStore<R>, path: &Path) -> Result<()> {
    let buf = fs::read(path).map_err(|e| GlitrError::io(path, e))?;
    let entries = decode(&buf)?;
    if entries.len() != store.len() {
        return Err(GlitrError::Checkpoint(format!(
            "{} holds {} tensors, model has {}",
            path.display(),
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        let id = store
            .find(&e.name)
            .ok_or_else(|| GlitrError::Checkpoint(format!("unknown parameter {}", e.name)))?;
        let t = Tensor::new(e.shape, e.values.into_iter().map(R::lit).collect())?;
        store.set_value(id, t)?;
    }
    Ok(())
}
