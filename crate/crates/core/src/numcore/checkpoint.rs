//! Parameter checkpoint files.
//!
//! ```text
//! "FCTW" | version u32 | variant u32 | entry count u32 | entries...
//! entry: name length u32 | name bytes (UTF-8) | rank u32 | dims u32[rank] | f32 payload
//! ```
//! All integers and floats are little-endian. Tensors are written as `f32`.

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{LinkError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCTW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(w: &mut W, variant: u32, store: &ParamStore<T>) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&variant.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for entry in store.entries() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = entry.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(entry.tensor.len() * 4);
        for &x in entry.tensor.data() {
            payload.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                LinkError::format(
                    self.pos as u64,
                    format!("truncated {what}: need {n} bytes, {} remain", self.buf.len() - self.pos),
                )
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decode a checkpoint; returns the variant code and the parameters.
/// Rank-2 tensors are marked for weight decay.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(u32, ParamStore<f32>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| LinkError::format(0, format!("read failed: {e}")))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(LinkError::format(0, "bad magic, expected FCTW"));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(LinkError::format(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let variant = cur.u32("variant")?;
    let count = cur.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = cur.pos as u64;
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| LinkError::format(at, "parameter name is not UTF-8"))?
            .to_owned();
        let rank = cur.u32("rank")? as usize;
        if rank > 8 {
            return Err(LinkError::format(cur.pos as u64, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dims")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| LinkError::format(cur.pos as u64, "tensor size overflows"))?;
        let data = cur
            .take(count, "payload")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let decay = rank == 2;
        store.add(name, Tensor::new(shape, data)?, decay);
    }
    if cur.pos != buf.len() {
        return Err(LinkError::format(cur.pos as u64, "trailing bytes after last entry"));
    }
    Ok((variant, store))
}
