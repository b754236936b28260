//! Little-endian tensor records: name length (u32), UTF-8 name, rank (u32),
//! extents (u32 each), then the values as raw IEEE-754 binary32.

use std::io::{Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

pub fn write_tensor_record<T: Real>(w: &mut impl Write, name: &str, t: &Tensor<T>) -> std::io::Result<()> {
    put_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    put_u32(w, t.rank())?;
    for &e in t.shape() {
        put_u32(w, e)?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Byte-counting reader so parse errors can name the failing offset.
pub(crate) struct Cursor<R> {
    inner: R,
    pub offset: usize,
}

impl<R: Read> Cursor<R> {
    pub fn new(inner: R, offset: usize) -> Self {
        Cursor { inner, offset }
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Parse {
            offset: self.offset,
            detail: format!("truncated {what}: {e}"),
        })?;
        self.offset += n;
        Ok(buf)
    }

    pub fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

pub fn read_tensor_record<T: Real>(r: &mut impl Read) -> Result<(String, Tensor<T>)> {
    let mut c = Cursor::new(r, 0);
    read_record(&mut c)
}

pub(crate) fn read_record<T: Real, R: Read>(c: &mut Cursor<R>) -> Result<(String, Tensor<T>)> {
    let start = c.offset;
    let name_len = c.u32("name length")?;
    if name_len > MAX_NAME {
        return Err(Error::Parse {
            offset: start,
            detail: format!("implausible name length {name_len}"),
        });
    }
    let name = String::from_utf8(c.bytes(name_len, "name")?).map_err(|_| Error::Parse {
        offset: start + 4,
        detail: "tensor name is not UTF-8".into(),
    })?;
    let rank_at = c.offset;
    let rank = c.u32("rank")?;
    if rank > MAX_RANK {
        return Err(Error::Parse {
            offset: rank_at,
            detail: format!("implausible rank {rank} for '{name}'"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(c.u32("extent")?);
    }
    let numel: usize = shape.iter().product();
    let raw = c.bytes(numel * 4, "values")?;
    let data = raw
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    let t = Tensor::new(&shape, data).map_err(|e| Error::Parse {
        offset: rank_at,
        detail: format!("bad shape for '{name}': {e}"),
    })?;
    Ok((name, t))
}
