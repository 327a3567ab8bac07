//! GTF: a flat little-endian container of named `f32` tensors.
//!
//! ```text
//! magic        4 bytes  "GTF1"
//! tensor_count u32 LE
//! per tensor:
//!   name_len   u16 LE
//!   name       name_len bytes, UTF-8
//!   dtype      u8 (0 = float32)
//!   ndim       u8
//!   dims       ndim x u64 LE
//!   payload    product(dims) x f32 LE, row-major
//! ```
//!
//! Entries are written in the map's key order, so a `BTreeMap` gives a
//! canonical byte stream.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GTF1";
pub const DTYPE_F32: u8 = 0;

pub type TensorMap = BTreeMap<String, Tensor>;

/// Serializes named tensors. Accepts any ordered sequence so duplicate names
/// can be rejected rather than silently merged.
pub fn write_gtf<'a, I>(tensors: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let entries: Vec<_> = tensors.into_iter().collect();
    let mut seen = std::collections::HashSet::new();
    for (name, _) in &entries {
        if !seen.insert(*name) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
    }
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Format("too many tensors for a GTF file".into()))?;

    let payload: usize = entries.iter().map(|(n, t)| 4 + n.len() + 8 * t.ndim() + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {} bytes", name.len())))?;
        let ndim = u8::try_from(t.ndim())
            .map_err(|_| Error::Format(format!("`{name}` has too many dimensions")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(ndim);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
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
                Error::Truncated(format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice length checked"))
    }
}

pub fn read_gtf(bytes: &[u8]) -> Result<TensorMap> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4, "magic").map_err(|_| Error::Format("file shorter than GTF magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"GTF1\"")));
    }
    let count = u32::from_le_bytes(cur.array("tensor count")?);
    let mut map = TensorMap::new();
    for idx in 0..count {
        let name_len = u16::from_le_bytes(cur.array("name length")?) as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format(format!("tensor #{idx} name is not UTF-8")))?
            .to_owned();
        let [dtype] = cur.array::<1>("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Unsupported(format!("`{name}` has dtype code {dtype}")));
        }
        let [ndim] = cur.array::<1>("ndim")?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            let d = u64::from_le_bytes(cur.array("dimension")?);
            shape.push(
                usize::try_from(d).map_err(|_| Error::Format(format!("`{name}` dimension {d} too large")))?,
            );
        }
        let elems = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("`{name}` shape {shape:?} overflows")))?;
        let raw = cur.take(elems, &format!("payload of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        if map.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        map.insert(name, Tensor::new(shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(map)
}

pub fn write_gtf_map(map: &TensorMap) -> Result<Vec<u8>> {
    write_gtf(map.iter().map(|(k, v)| (k.as_str(), v)))
}

pub fn load_gtf(path: &Path) -> Result<TensorMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_gtf(&bytes)
}

pub fn save_gtf(path: &Path, map: &TensorMap) -> Result<()> {
    let bytes = write_gtf_map(map)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
