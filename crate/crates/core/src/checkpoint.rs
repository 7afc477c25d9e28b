//! `SCTNW1` weight files: magic, `u32` array count, then per array
//! `u32` name length, name bytes, `u32` rank, `u32` dims, `f32` data. All
//! little-endian.

use std::path::Path;

use thiserror::Error;

use crate::nn::{named_params, Module};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"SCTNW1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not an SCTNW1 checkpoint")]
    BadMagic,
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint has no tensor named {0}")]
    Missing(String),
    #[error("tensor {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint tensor {0} is not used by the model")]
    Unexpected(String),
    #[error("tensor {0} holds a non-finite value")]
    NonFinite(String),
}

pub fn encode(arrays: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8_lossy(r.take(len)?).into_owned();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(bytes.len()))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let t = Tensor::new(shape, data).map_err(|_| CheckpointError::NonFinite(name.clone()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save<M: Module + ?Sized>(module: &mut M, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(&named_params(module))).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Copies named arrays into `module`, requiring an exact name and shape match.
pub fn assign<M: Module + ?Sized>(module: &mut M, arrays: Vec<(String, Tensor)>) -> Result<(), CheckpointError> {
    let mut by_name: std::collections::HashMap<String, Tensor> = arrays.into_iter().collect();
    let mut err = None;
    module.visit_params("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match by_name.remove(&name) {
            None => err = Some(CheckpointError::Missing(name)),
            Some(v) if v.shape() != t.shape() => {
                err = Some(CheckpointError::Shape {
                    name,
                    found: v.shape().to_vec(),
                    expected: t.shape().to_vec(),
                })
            }
            Some(v) => *t = v,
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = by_name.into_keys().min() {
        return Err(CheckpointError::Unexpected(extra));
    }
    Ok(())
}

pub fn load<M: Module + ?Sized>(module: &mut M, path: &Path) -> Result<(), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    assign(module, decode(&bytes)?)
}

/// Rounds every parameter to `f32`, matching what a save/load cycle stores.
pub fn quantize<M: Module + ?Sized>(module: &mut M) {
    module.visit_params("", &mut |_, t| {
        let data = t.data().iter().map(|&v| f64::from(v as f32)).collect();
        *t = Tensor::new(t.shape().to_vec(), data).expect("finite parameters");
    });
}
