//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "PGGACTNN"
//! version   u32
//! count     u32      number of tensors
//! per tensor:
//!   name_len u16, name (UTF-8)
//!   rows u64, cols u64
//!   data     rows * cols f64 values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::PolicyParams;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PGGACTNN";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl PolicyParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&8u32.to_le_bytes());
        for ((name, (rows, cols)), data) in PolicyParams::tensor_names()
            .iter()
            .zip(self.shapes())
            .zip(self.tensors())
        {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(rows as u64).to_le_bytes());
            out.extend_from_slice(&(cols as u64).to_le_bytes());
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        if count != 8 {
            return Err(Error::Checkpoint(format!("expected 8 tensors, found {count}")));
        }
        let mut tensors = Vec::with_capacity(8);
        for expected in PolicyParams::tensor_names() {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != expected {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {expected}, found {name}"
                )));
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
            let data: Vec<f64> = r
                .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(((rows, cols), data));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let (hidden, state_dim) = tensors[0].0;
        let mut params = PolicyParams::zeros(state_dim, hidden);
        for ((shape, data), (expected, slot)) in tensors
            .into_iter()
            .zip(params.shapes().into_iter().zip(params.tensors_mut()))
        {
            if shape != expected {
                return Err(Error::Checkpoint(format!(
                    "shape {shape:?} does not match {expected:?}"
                )));
            }
            *slot = data;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
