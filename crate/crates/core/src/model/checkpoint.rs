//! Binary checkpoint of named tensors.
//!
//! Layout (all integers `u64` little-endian, values `f64` little-endian):
//!
//! ```text
//! b"SBRCKPT1"
//! entry_count
//! repeated entry_count times:
//!     name_len, name bytes (UTF-8)
//!     rank, dims[rank]
//!     values[product(dims)]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::ModelError;
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 8] = b"SBRCKPT1";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u64(&mut out, self.entries.len() as u64);
        for (name, t) in &self.entries {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.rank() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(corrupt("bad magic or unsupported version"));
        }
        let count = r.u64()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = r.len_prefix(1)?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("entry name is not UTF-8"))?
                .to_owned();
            let rank = r.len_prefix(8)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len_prefix(1)?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt("tensor size overflows"))?;
            if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(corrupt("truncated tensor data"));
            }
            let data = (0..n)
                .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
                .collect::<Result<Vec<_>, _>>()?;
            let t = Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?;
            entries.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes after last entry"));
        }
        Ok(Self { entries })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn corrupt(msg: &str) -> ModelError {
    ModelError::Corrupt(msg.to_owned())
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if n > self.remaining() {
            return Err(corrupt("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A length that must fit in the rest of the file at `unit` bytes per item.
    fn len_prefix(&mut self, unit: usize) -> Result<usize, ModelError> {
        let v = self.u64()?;
        let v = usize::try_from(v).map_err(|_| corrupt("length does not fit in memory"))?;
        if v.saturating_mul(unit) > self.remaining() {
            return Err(corrupt("length prefix exceeds file size"));
        }
        Ok(v)
    }
}
