//! Aggregator checkpoint codec.
//!
//! ```text
//! magic "CLETAGG\0" | u32 version | u32 dim | u32 layers | f64 lambda_logit
//! | layers × dim × dim f32, row-major          (all little-endian)
//! ```
//!
//! Projections are stored as f32. Parameters whose entries are already
//! f32-representable (see [`AggregatorParams::round_projections_to_f32`])
//! survive a save/load cycle bit for bit.

use std::path::Path;

use super::AggregatorParams;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CLETAGG\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

pub fn encode_params(params: &AggregatorParams) -> Result<Vec<u8>> {
    let dim = u32::try_from(params.dim())
        .map_err(|_| Error::HeaderOverflow(format!("dim {}", params.dim())))?;
    let layers = u32::try_from(params.num_layers())
        .map_err(|_| Error::HeaderOverflow(format!("layers {}", params.num_layers())))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + params.num_layers() * params.dim().pow(2) * 4);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&layers.to_le_bytes());
    buf.extend_from_slice(&params.lambda_logit.to_le_bytes());
    for m in params.projections() {
        for &x in m.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_params(bytes: &[u8]) -> Result<AggregatorParams> {
    let prefix = &bytes[..bytes.len().min(8)];
    if prefix.is_empty() || prefix != &CHECKPOINT_MAGIC[..prefix.len()] {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(&CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(prefix).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = u32_at(12) as usize;
    let layers = u32_at(16) as usize;
    let lambda_logit = f64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));

    let expected = (layers as u64)
        .checked_mul((dim as u64).pow(2))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .unwrap_or(u64::MAX);
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::TrailingBytes(actual - expected));
    }

    let per = dim * dim;
    let floats: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let projections = (0..layers)
        .map(|l| Matrix::from_vec(dim, dim, floats[l * per..(l + 1) * per].to_vec()))
        .collect();
    AggregatorParams::new(dim, projections, lambda_logit)
}

pub fn save_params(params: &AggregatorParams, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode_params(params)?)
}

pub fn load_params(path: &Path) -> Result<AggregatorParams> {
    decode_params(&fsutil::read_file(path)?)
}
