//! Binary checkpoint format.
//!
//! `"DSPK"`, `u32` version 1, `u32` tensor count, then per tensor in
//! lexicographic name order: `u16` name length, UTF-8 name, `u8` rank,
//! `rank` x `u32` dims and the `f32` values, all little-endian.

use std::path::Path;

use super::ModelParams;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSPK";
const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut params = ModelParams::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(Error::Format("tensors are not in lexicographic order".into()));
        }
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        last = Some(name.clone());
        params.insert(name, Tensor { shape, data });
    }
    if !r.buf.is_empty() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Rounds every value through `f32`, matching what a save/load cycle keeps.
pub fn quantize(params: &mut ModelParams) {
    for t in params.values_mut() {
        t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
