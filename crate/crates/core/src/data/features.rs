//! Feature and frame-label files.
//!
//! A feature file is the magic `VADF`, a `u32` version, `u32` snippet count
//! `T`, `u32` dimension `D`, then `T·D` little-endian `f32` values in
//! time-major order. Frame-label files are raw bytes, one 0/1 per frame.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"VADF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(x: &Tensor<f32>) -> Result<Vec<u8>> {
    let (t, d) = x.dims2()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + x.numel() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in x.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<Tensor<f32>, FormatError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != FEATURE_MAGIC {
            return Err(FormatError::BadMagic {
                expected: FEATURE_MAGIC,
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(FormatError::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    if word(4) != FEATURE_VERSION {
        return Err(FormatError::UnsupportedVersion(word(4)));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| FormatError::Invalid(format!("header dimensions {t}×{d} overflow")))?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingData {
            extra: bytes.len() - expected,
        });
    }
    let mut data = Vec::with_capacity(t * d);
    for (index, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFinite { index });
        }
        data.push(v);
    }
    Tensor::new(vec![t, d], data).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn write_feature_file(path: impl AsRef<Path>, x: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(x)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| Error::format(path, e))
}

pub fn decode_frame_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, FormatError> {
    if let Some(index) = bytes.iter().position(|&b| b > 1) {
        return Err(FormatError::BadLabel {
            index,
            value: bytes[index],
        });
    }
    Ok(bytes.to_vec())
}

pub fn write_frame_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    decode_frame_labels(labels).map_err(|e| Error::format(path, e))?;
    fs::write(path, labels).map_err(|e| Error::io(path, e))
}

pub fn read_frame_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame_labels(&bytes).map_err(|e| Error::format(path, e))
}
