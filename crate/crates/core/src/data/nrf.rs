//! NRF: a minimal little-endian container for rainfall frame stacks.
//!
//! ```text
//! "NRF1" | u32 frames | u32 height | u32 width | f64 cadence_minutes
//!        | frames*height*width f32 values, frame-major then row-major
//! ```

use std::path::Path;

use ndarray::Array3;

use super::FrameSequence;
use crate::{Error, Result, MAX_RAIN_RATE};

pub const MAGIC: &[u8; 4] = b"NRF1";
pub const HEADER_LEN: usize = 4 + 3 * 4 + 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NrfError {
    #[error("bad NRF magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated NRF data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("NRF value {value} at index {index} is outside [0, 128]")]
    OutOfRange { index: usize, value: f32 },
    #[error("NRF file has {0} unexpected trailing bytes")]
    TrailingData(usize),
    #[error("NRF header is invalid: {0}")]
    BadHeader(String),
}

pub fn encode(seq: &FrameSequence) -> Vec<u8> {
    let (t, h, w) = seq.frames().dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * h * w);
    out.extend_from_slice(MAGIC);
    for d in [t, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&seq.cadence_minutes().to_le_bytes());
    for v in seq.frames().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<FrameSequence, NrfError> {
    if bytes.len() < 4 {
        return Err(NrfError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if &magic != MAGIC {
        return Err(NrfError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(NrfError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("four bytes"));
    let (t, h, w) = (u32_at(4) as usize, u32_at(8) as usize, u32_at(12) as usize);
    let cadence = f64::from_le_bytes(bytes[16..24].try_into().expect("eight bytes"));
    if !(cadence.is_finite() && cadence > 0.0) {
        return Err(NrfError::BadHeader(format!("cadence {cadence}")));
    }
    let count = t
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| NrfError::BadHeader(format!("dimensions {t}x{h}x{w} overflow")))?;
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| NrfError::BadHeader(format!("dimensions {t}x{h}x{w} overflow")))?;
    if bytes.len() < expected {
        return Err(NrfError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(NrfError::TrailingData(bytes.len() - expected));
    }
    let mut values = Vec::with_capacity(count);
    for (index, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let value = f32::from_le_bytes(chunk.try_into().expect("four bytes"));
        if !(0.0..=MAX_RAIN_RATE).contains(&value) {
            return Err(NrfError::OutOfRange { index, value });
        }
        values.push(value);
    }
    let frames = Array3::from_shape_vec((t, h, w), values).expect("length checked");
    Ok(FrameSequence::from_parts_unchecked(frames, cadence))
}

pub fn save_nrf(seq: &FrameSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    seq.validate()?;
    std::fs::write(path, encode(seq)).map_err(|e| Error::io(path, e))
}

pub fn load_nrf(path: impl AsRef<Path>) -> Result<FrameSequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
