//! Flat named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"FDTNT\0" + u16 format version
//! u32      manifest length, then manifest bytes (UTF-8 JSON)
//! u32      tensor count
//! repeated name_len:u16 name:utf8 ndim:u8 dims:u32*ndim payload:f64*prod(dims)
//! [u8;32]  SHA-256 of every preceding byte
//! ```
//!
//! Tensors are written in name order. The same encoding carries federation
//! messages and round checkpoints.

use sha2::{Digest, Sha256};

use super::params::NamedTensors;
use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 6] = b"FDTNT\0";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode(manifest: &str, tensors: &NamedTensors) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + manifest.len() + tensors.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a container, verifying magic, version and trailing digest.
pub fn decode(bytes: &[u8]) -> Result<(String, NamedTensors)> {
    if bytes.len() < MAGIC.len() + 2 + 32 {
        return Err(Error::Checkpoint("container too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("container digest mismatch (corrupted)".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mlen = r.u32()? as usize;
    let manifest = std::str::from_utf8(r.take(mlen)?)
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?
        .to_string();
    let count = r.u32()?;
    let mut tensors = NamedTensors::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((manifest, tensors))
}
