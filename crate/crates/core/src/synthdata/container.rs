//! Little-endian binary tensor container.
//!
//! ```text
//! magic "MMDT" | version u16 = 1 | count u32
//! per entry: name_len u16 | name (ASCII) | dtype u8 (0 = f64) | ndim u8
//!            | shape u64 × ndim | values f64 × prod(shape)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMDT";
pub const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

pub fn encode_tensors(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::contract("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (i, (name, t)) in entries.iter().enumerate() {
        if !name.is_ascii() || name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::contract(format!("invalid tensor name {name:?}")));
        }
        if entries[..i].iter().any(|(n, _)| n == name) {
            return Err(Error::contract(format!("duplicate tensor name {name:?}")));
        }
        if t.rank() > u8::MAX as usize {
            return Err(Error::contract(format!("tensor {name} has too many axes")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let avail = self.buf.len() - self.pos;
        if n > avail {
            return Err(Error::Container {
                offset: self.pos as u64,
                detail: format!("truncated {what}: expected {n} bytes, {avail} available"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail(&self, at: usize, detail: impl Into<String>) -> Error {
        Error::Container {
            offset: at as u64,
            detail: detail.into(),
        }
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected \"MMDT\""));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = r.take(len, "name")?;
        if !name.is_ascii() {
            return Err(r.fail(at, "tensor name is not ASCII"));
        }
        let name = String::from_utf8(name.to_vec()).expect("ascii");
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(r.fail(dtype_at, format!("unknown dtype {dtype}")));
        }
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("shape")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| r.fail(dtype_at, "shape overflows"))?;
        let data_at = r.pos;
        let raw = r.take(n, &format!("values of '{name}'"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| r.fail(data_at, e.to_string()))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(r.fail(r.pos, "trailing bytes after last entry"));
    }
    Ok(out)
}

pub fn save_tensors(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_tensors(entries)?)?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode_tensors(&fs::read(path)?)
}
