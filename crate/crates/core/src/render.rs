//! Grayscale PGM output for rainfall frames.

use std::path::{Path, PathBuf};

use ndarray::ArrayView2;

use crate::data::FrameSequence;
use crate::{Error, Result, MAX_RAIN_RATE};

/// Pixel value for a rain rate: `round(v · 255 / 128)`, clamped to a byte.
pub fn pixel(value: f32) -> u8 {
    (value as f64 * 255.0 / MAX_RAIN_RATE as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// Binary (P5) PGM encoding of one frame.
pub fn pgm_bytes(frame: ArrayView2<'_, f32>) -> Vec<u8> {
    let (h, w) = frame.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.iter().map(|v| pixel(*v)));
    out
}

/// Writes `frame_000.pgm`, `frame_001.pgm`, ... into `dir`.
pub fn render_sequence(seq: &FrameSequence, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(seq.len());
    for (i, frame) in seq.frames().outer_iter().enumerate() {
        let path = dir.join(format!("frame_{i:03}.pgm"));
        std::fs::write(&path, pgm_bytes(frame)).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
