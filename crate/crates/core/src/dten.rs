//! `DTEN` tensor encoding.
//!
//! ```text
//! b"DTEN" | u8 version (1) | u32 rank | rank × u32 dims | f32 payload
//! ```
//!
//! All integers and floats are little-endian.

use alloc::vec::Vec;

use crate::error::TensorError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DTEN";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DtenError {
    #[error("not a DTEN file (bad magic)")]
    BadMagic,
    #[error("unsupported DTEN version {0}")]
    Version(u8),
    #[error("truncated DTEN data: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after DTEN payload")]
    Trailing(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let dims = t.dims();
    let mut out = Vec::with_capacity(9 + 4 * dims.len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DtenError> {
        let end = self.pos.checked_add(n).ok_or(DtenError::Truncated {
            needed: usize::MAX,
            have: self.bytes.len(),
        })?;
        let s = self.bytes.get(self.pos..end).ok_or(DtenError::Truncated {
            needed: end,
            have: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DtenError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, DtenError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| DtenError::BadMagic)? != MAGIC {
        return Err(DtenError::BadMagic);
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(DtenError::Version(version));
    }
    let rank = r.u32()? as usize;
    // Bound rank by what the buffer can hold before allocating.
    if rank > bytes.len() / 4 {
        return Err(DtenError::Truncated {
            needed: 9 + 4 * rank,
            have: bytes.len(),
        });
    }
    let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let count = count.ok_or(DtenError::Truncated {
        needed: usize::MAX,
        have: bytes.len(),
    })?;
    let payload = r.take(count.saturating_mul(4))?;
    if r.pos != bytes.len() {
        return Err(DtenError::Trailing(bytes.len() - r.pos));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::from_vec(&dims, data)?)
}
