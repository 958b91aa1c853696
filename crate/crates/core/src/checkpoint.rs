//! Named-tensor binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "ATMXCKPT"
//! version      u32
//! endian tag   u32      0x01020304
//! entry count  u32
//! entries      name_len u32, name (UTF-8), ndim u32, dims u64 × ndim, offset u64
//! payload len  u64      number of f64 values
//! payload      f64 × payload len
//! ```
//!
//! Offsets count elements from the start of the payload and must tile it exactly.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ATMXCKPT";
pub const VERSION: u32 = 1;
const ENDIAN_TAG: u32 = 0x0102_0304;

pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for (name, _) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Input(format!("duplicate tensor name `{name}`")));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ENDIAN_TAG.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += t.numel() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, t) in tensors {
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
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                pos: self.pos,
                msg: format!("truncated while reading {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail<T>(&self, at: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { pos: at, msg: msg.into() })
    }
}

pub fn decode(buf: &[u8]) -> Result<NamedTensors> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return r.fail(0, "bad magic");
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(at, format!("unsupported version {version}, expected {VERSION}"));
    }
    let at = r.pos;
    if r.u32("endian tag")? != ENDIAN_TAG {
        return r.fail(at, "endianness tag mismatch");
    }
    let count = r.u32("entry count")? as usize;

    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    let mut names = HashSet::new();
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { pos: at, msg: "name is not UTF-8".into() })?
            .to_string();
        if !names.insert(name.clone()) {
            return r.fail(at, format!("duplicate tensor name `{name}`"));
        }
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        let mut numel = 1u64;
        for _ in 0..ndim {
            let at = r.pos;
            let d = r.u64("dimension")?;
            if d == 0 {
                return r.fail(at, format!("zero dimension in `{name}`"));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format { pos: at, msg: "tensor size overflows".into() })?;
            shape.push(d as usize);
        }
        let at = r.pos;
        let offset = r.u64("offset")?;
        if offset != expected_offset {
            return r.fail(at, format!("offset {offset} for `{name}`, expected {expected_offset}"));
        }
        expected_offset += numel;
        manifest.push((name, shape, numel as usize));
    }
    let at = r.pos;
    let payload_len = r.u64("payload length")?;
    if payload_len != expected_offset {
        return r.fail(at, format!("payload holds {payload_len} values, manifest needs {expected_offset}"));
    }
    let bytes = (payload_len as usize)
        .checked_mul(8)
        .ok_or_else(|| Error::Format { pos: at, msg: "payload size overflows".into() })?;
    let payload = r.take(bytes, "payload")?;
    if r.pos != buf.len() {
        return r.fail(r.pos, format!("{} trailing bytes", buf.len() - r.pos));
    }

    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut out = Vec::with_capacity(manifest.len());
    for (name, shape, numel) in manifest {
        let data: Vec<f64> = values.by_ref().take(numel).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(tensors: &[(String, Tensor)], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
