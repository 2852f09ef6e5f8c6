//! Immutable row-major `f64` arrays and the `VSDT` binary encoding.
//!
//! Layout of an encoded tensor (all integers little-endian):
//!
//! ```text
//! b"VSDT" | version: u32 | ndim: u32 | extents: ndim x u64 | payload: numel x f64
//! ```

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const VSDT_MAGIC: &[u8; 4] = b"VSDT";
pub const VSDT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n].into(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect::<Vec<_>>().into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Owned data, copying only when the buffer is shared.
    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.to_vec())
    }

    /// Same data viewed with a different shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect::<Vec<_>>().into(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    pub fn to_vsdt_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.shape.len() + 8 * self.numel());
        out.extend_from_slice(VSDT_MAGIC);
        out.extend_from_slice(&VSDT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in self.data.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Decodes one tensor from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn from_vsdt_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.take(4)? != VSDT_MAGIC {
            return Err(Error::Format("bad magic, expected VSDT".into()));
        }
        let version = cursor.u32()?;
        if version != VSDT_VERSION {
            return Err(Error::Format(format!("unsupported VSDT version {version}")));
        }
        let ndim = cursor.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let e = cursor.u64()?;
            shape.push(usize::try_from(e).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format("element count overflow".into()))?;
        let payload = cursor.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format("payload overflow".into()))?,
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect::<Vec<_>>();
        Ok((Self::new(&shape, data)?, cursor.pos))
    }

    pub fn from_vsdt_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::from_vsdt_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor",
                bytes.len() - used
            )));
        }
        Ok(t)
    }
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
            .ok_or_else(|| Error::Format("truncated VSDT data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
