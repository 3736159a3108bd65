//! Shared low-level layout for named `f32` tensors, used by checkpoints and frame archives.
//!
//! Each tensor is `name_len: u64 | name | rank: u64 | dims: rank x u64 | data: f32 LE`.

use std::collections::BTreeMap;

const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u64 = 8;

pub(crate) fn write_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u64).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u64).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for x in data {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated while reading {what}"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// A tensor as stored: dims plus raw little-endian `f32` bytes.
pub(crate) struct RawTensor<'a> {
    pub dims: Vec<usize>,
    pub bytes: &'a [u8],
}

impl RawTensor<'_> {
    /// Decodes the data, rejecting non-finite values.
    pub(crate) fn values(&self) -> Result<Vec<f64>, String> {
        self.bytes
            .chunks_exact(4)
            .map(|c| {
                let x = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                if x.is_finite() {
                    Ok(x as f64)
                } else {
                    Err("non-finite value".to_string())
                }
            })
            .collect()
    }
}

/// Reads tensors until the end of the buffer. Names must be unique.
pub(crate) fn read_tensors<'a>(cur: &mut Cursor<'a>) -> Result<BTreeMap<String, RawTensor<'a>>, String> {
    let mut tensors = BTreeMap::new();
    while cur.remaining() > 0 {
        let name_len = cur.u64("name length")?;
        if name_len > MAX_NAME_LEN {
            return Err("tensor name too long".into());
        }
        let name = std::str::from_utf8(cur.take(name_len as usize, "name")?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = cur.u64("rank")?;
        if rank > MAX_RANK {
            return Err(format!("tensor {name} has rank {rank}"));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(cur.u64("dim")?).map_err(|_| "dimension overflow".to_string())?;
            count = count.checked_mul(d).ok_or("dimension overflow")?;
            dims.push(d);
        }
        let len = count.checked_mul(4).ok_or("dimension overflow")?;
        let bytes = cur.take(len, "tensor data")?;
        if tensors.insert(name.clone(), RawTensor { dims, bytes }).is_some() {
            return Err(format!("duplicate tensor {name}"));
        }
    }
    Ok(tensors)
}
