//! Binary parameter files: `MTMCKPT1`, u32 tensor count, then per tensor a
//! u16 name length, UTF-8 name, u8 rank, u64 dims and f64 payload, all
//! little-endian, tensors in sorted name order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::stylegen::Params;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MTMCKPT1";

pub fn encode(params: &Params) -> Result<Vec<u8>> {
    let count = u32::try_from(params.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Params> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = u32::from_le_bytes(r.array()?);
    let mut params = Params::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(r.array()?);
            shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension {d} too large")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: element count overflows")))?;
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("payload too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &Params) -> Result<()> {
    fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Params> {
    decode(&fs::read(path)?)
}
