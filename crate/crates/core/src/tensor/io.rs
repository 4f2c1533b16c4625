//! Flat binary weight container.
//!
//! ```text
//! "SODW" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: UTF-8 bytes | rank: u32 | extents: rank x u64 | values: numel x f64
//! ```
//! All integers and floats little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"SODW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "weight container",
        detail: detail.into(),
    }
}

fn write_err(e: std::io::Error) -> Error {
    format_err(format!("write failed: {e}"))
}

pub fn write_weights<W: Write>(mut w: W, records: &[WeightRecord]) -> Result<()> {
    w.write_all(&WEIGHTS_MAGIC).map_err(write_err)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes()).map_err(write_err)?;
    for r in records {
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(format_err(format!("record {} has shape {:?} but {} values", r.name, r.shape, r.data.len())));
        }
        let name = r.name.as_bytes();
        let mut buf = Vec::with_capacity(8 + name.len() + 8 * r.shape.len() + 8 * r.data.len());
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(write_err)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_weights<R: Read>(mut r: R) -> Result<Vec<WeightRecord>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| format_err(format!("read failed: {e}")))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let version = c.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| format_err("name is not UTF-8"))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u64("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err(format!("extent overflow in {name}")))?;
        let raw = c.take(numel.checked_mul(8).ok_or_else(|| format_err("size overflow"))?, "values")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        records.push(WeightRecord { name, shape, data });
    }
    Ok(records)
}
