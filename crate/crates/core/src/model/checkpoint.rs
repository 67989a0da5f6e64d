//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `SAVD`, version `u32`, then for each
//! parameter: name length `u16`, UTF-8 name, rank `u8`, one `u32` per extent,
//! and the row-major `f32` values. Parameters run to the end of the file.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, FormatError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, MAX_RANK};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SAVD";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar, W: Write>(
    mut w: W,
    params: &ModelParams<S>,
) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(16 + params.num_scalars() * 4);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in params.tensors() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, params: &ModelParams<S>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(file), params).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes into named `f32` tensors, in file order.
pub fn read_checkpoint(
    bytes: &[u8],
) -> std::result::Result<Vec<(String, Tensor<f32>)>, FormatError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let mut out = Vec::new();
    let mut element = 0usize;
    while cur.pos < bytes.len() {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| FormatError::Invalid("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        if rank > MAX_RANK {
            return Err(FormatError::Invalid(format!(
                "parameter `{name}` has rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::NonFinite { index: element });
            }
            element += 1;
            data.push(v);
        }
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Reads a checkpoint and validates it against `config`'s architecture.
pub fn load_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    config: &ModelConfig,
) -> Result<ModelParams<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let named = read_checkpoint(&bytes).map_err(|e| Error::format(path, e))?;
    let named = named.into_iter().map(|(n, t)| (n, t.cast::<S>())).collect();
    ModelParams::from_named(config, named)
}

/// Reads a checkpoint, taking layer widths from its tensor shapes and the
/// remaining settings (dropout, slopes) from `base`.
pub fn load_checkpoint_auto<S: Scalar>(
    path: impl AsRef<Path>,
    base: &ModelConfig,
) -> Result<ModelParams<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let named = read_checkpoint(&bytes).map_err(|e| Error::format(path, e))?;
    let config = architecture_of(&named, base).map_err(|e| Error::format(path, e))?;
    let named = named.into_iter().map(|(n, t)| (n, t.cast::<S>())).collect();
    ModelParams::from_named(&config, named)
}

fn architecture_of(
    named: &[(String, Tensor<f32>)],
    base: &ModelConfig,
) -> std::result::Result<ModelConfig, FormatError> {
    let shape = |name: &str| {
        named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape().to_vec())
            .ok_or_else(|| FormatError::Invalid(format!("checkpoint lacks `{name}`")))
    };
    let dims = |name: &str, rank: usize| {
        let s = shape(name)?;
        if s.len() == rank {
            Ok(s)
        } else {
            Err(FormatError::Invalid(format!("`{name}` has shape {s:?}")))
        }
    };
    let agg = dims("embed.aggregate.weight", 3)?;
    let att = dims("attention.0.weight", 3)?;
    let c0 = dims("classifier.0.weight", 2)?;
    let c1 = dims("classifier.1.weight", 2)?;
    Ok(ModelConfig {
        feature_dim: agg[1],
        kernel_size: agg[0],
        attention_hidden: att[2],
        classifier_hidden: [c0[1], c1[1]],
        conv_bias: named.iter().any(|(n, _)| n == "embed.aggregate.bias"),
        ..base.clone()
    })
}
