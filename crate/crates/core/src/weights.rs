//! Named tensor sets and the `CFPA` weight file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CFPA" | u32 version = 1 | u32 tensor count
//! per tensor:
//!   u32 name length | name (UTF-8) | u8 dtype (0 = f32, 1 = int8) | u8 rank
//!   rank x u64 extents
//!   dtype 0: row-major f32 payload
//!   dtype 1: int8 payload | f32 f_min | f32 f_max | f32 scale | i32 zero point
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::quant::{dequantize, QuantParams, QuantizedTensor};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"CFPA";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Float(Tensor),
    Quantized(QuantizedTensor),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::Float(t) => t.shape(),
            StoredTensor::Quantized(q) => q.shape(),
        }
    }

    /// The values used at inference: the tensor itself, or its reconstruction.
    pub fn materialize(&self) -> Tensor {
        match self {
            StoredTensor::Float(t) => t.clone(),
            StoredTensor::Quantized(q) => dequantize(q),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, StoredTensor::Quantized(_))
    }
}

/// Insertion-ordered tensor collection; file order follows insertion order.
pub type WeightSet = IndexMap<String, StoredTensor>;

pub fn encode(weights: &WeightSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, t) in weights {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(if t.is_quantized() {
            DTYPE_I8
        } else {
            DTYPE_F32
        });
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match t {
            StoredTensor::Float(f) => {
                for v in f.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            StoredTensor::Quantized(q) => {
                out.extend(q.qdata().iter().map(|&v| v as u8));
                let p = q.params();
                out.extend_from_slice(&p.f_min.to_le_bytes());
                out.extend_from_slice(&p.f_max.to_le_bytes());
                out.extend_from_slice(&p.scale.to_le_bytes());
                out.extend_from_slice(&p.zero_point.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    tensor: String,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Load {
            tensor: self.tensor.clone(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.fail(format!("truncated: need {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightSet> {
    let mut r = Reader {
        bytes,
        pos: 0,
        tensor: "<header>".into(),
    };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, expected \"CFPA\""));
    }
    let version = r.u32()?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = WeightSet::with_capacity(count.min(4096));
    for i in 0..count {
        r.tensor = format!("#{i}");
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        r.tensor = name.clone();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(r.fail(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = r.u64()?;
            shape.push(usize::try_from(e).map_err(|_| r.fail("extent overflows"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| r.fail("element count overflows"))?;
        let stored = match dtype {
            DTYPE_F32 => {
                let raw = r.take(
                    n.checked_mul(4)
                        .ok_or_else(|| r.fail("payload overflows"))?,
                )?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                StoredTensor::Float(Tensor::new(&shape, data).map_err(|e| r.fail(e.to_string()))?)
            }
            DTYPE_I8 => {
                let qdata = r.take(n)?.iter().map(|&b| b as i8).collect();
                let params = QuantParams {
                    f_min: r.f32()?,
                    f_max: r.f32()?,
                    scale: r.f32()?,
                    zero_point: r.u32()? as i32,
                };
                StoredTensor::Quantized(
                    QuantizedTensor::new(&shape, qdata, params)
                        .map_err(|e| r.fail(e.to_string()))?,
                )
            }
            other => {
                r.pos -= 2 + 8 * rank;
                return Err(r.fail(format!("unknown dtype code {other}")));
            }
        };
        if out.insert(name, stored).is_some() {
            return Err(r.fail("duplicate tensor name"));
        }
    }
    if r.pos != bytes.len() {
        r.tensor = "<trailer>".into();
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(weights: &WeightSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode(weights))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<WeightSet> {
    decode(&std::fs::read(path)?)
}
