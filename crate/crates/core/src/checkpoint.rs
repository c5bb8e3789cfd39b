//! `MTTN` named-array files.
//!
//! Layout (all integers little-endian): magic `MTTN`, version `u32`, entry
//! count `u32`; then per entry: name length `u32`, UTF-8 name, dtype `u8`
//! (0 = f32, 1 = f64), rank `u32`, dims as `u64`, raw values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MTTN";
pub const VERSION: u32 = 1;

/// A tensor of either supported precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// The tensor at precision `F`, converting when stored at the other one.
    pub fn to_real<F: Real>(&self) -> Tensor<F> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

fn write_tensor<F: Real>(out: &mut Vec<u8>, t: &Tensor<F>) {
    out.push(F::DTYPE);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode(entries: &[(String, AnyTensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match t {
            AnyTensor::F32(t) => write_tensor(&mut out, t),
            AnyTensor::F64(t) => write_tensor(&mut out, t),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor<F: Real>(&mut self, shape: Vec<usize>) -> Result<Tensor<F>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * F::BYTES, "tensor values")?;
        let data = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        Tensor::new(shape, data).map_err(|e| self.fail(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, AnyTensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, expected MTTN"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let start = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: start as u64,
                message: "name is not UTF-8".into(),
            })?
            .to_string();
        let dtype_at = r.pos;
        let dtype = r.take(1, "dtype")?[0];
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u64("dim")?;
            if d == 0 {
                return Err(r.fail("zero dimension"));
            }
            shape.push(d as usize);
        }
        let t = match dtype {
            0 => AnyTensor::F32(r.tensor(shape)?),
            1 => AnyTensor::F64(r.tensor(shape)?),
            other => {
                return Err(Error::Format {
                    offset: dtype_at as u64,
                    message: format!("unknown dtype tag {other}"),
                })
            }
        };
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last entry"));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, AnyTensor)]) -> Result<()> {
    std::fs::write(path, encode(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    decode(&std::fs::read(path)?)
}

/// Encodes a single tensor and decodes it back.
pub fn tensor_io_roundtrip<F: Real>(t: &Tensor<F>) -> Result<Tensor<F>>
where
    AnyTensor: From<Tensor<F>>,
{
    let bytes = encode(&[("t".to_string(), AnyTensor::from(t.clone()))]);
    let mut back = decode(&bytes)?;
    Ok(back.remove(0).1.to_real())
}
