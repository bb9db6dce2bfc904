//! Named-tensor checkpoint container.
//!
//! All integers and values are little-endian:
//!
//! ```text
//! magic      8 bytes   b"RFWCKPT\0"
//! version    u32       currently 1
//! count      u32       number of entries
//! entry * count:
//!   name_len u32
//!   name     name_len bytes of UTF-8
//!   rank     u32
//!   dims     rank * u64
//!   values   prod(dims) * f64, row-major
//! checksum   u64       FNV-1a over every preceding byte
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RFWCKPT\0";
pub const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(TensorError::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let mut cur = Cursor { bytes, pos: 8 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads version {VERSION})"
        )));
    }
    if bytes.len() < 8 + 4 + 4 + 8 {
        return Err(TensorError::Checkpoint("truncated header".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(TensorError::Checkpoint(format!(
            "checksum mismatch (version {version} file is corrupt)"
        )));
    }
    let mut cur = Cursor {
        bytes: body,
        pos: 12,
    };
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| TensorError::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| {
                TensorError::Checkpoint(format!("entry {name}: shape {dims:?} overflows"))
            })?;
        let raw = cur.take(
            n.checked_mul(8)
                .ok_or_else(|| TensorError::Checkpoint(format!("entry {name}: too large")))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(values, &dims)
            .map_err(|e| TensorError::Checkpoint(format!("entry {name}: {e}")))?;
        entries.push((name, t));
    }
    if cur.pos != body.len() {
        return Err(TensorError::Checkpoint(format!(
            "{} trailing bytes after the last entry",
            body.len() - cur.pos
        )));
    }
    Ok(entries)
}

pub fn write_to(mut w: impl Write, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(&encode(entries))?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(entries))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}
