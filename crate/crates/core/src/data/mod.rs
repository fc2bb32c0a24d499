//! Rainfall frame sequences, their on-disk format, windowing into training
//! samples and the mapping between mm/h and model space.

mod nrf;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array, Array3, ArrayView, Dimension};

pub use nrf::{decode, encode, load_nrf, save_nrf, NrfError};
pub use synth::{synth_advection, RainCell, SynthConfig, SynthSequence};

use crate::{config_check, contract, Error, Result, INPUT_FRAMES, MAX_RAIN_RATE, TARGET_FRAMES};

/// Frames per training window.
pub const WINDOW: usize = INPUT_FRAMES + TARGET_FRAMES;

/// `(frames, H, W)` rainfall intensities in mm/h.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Array3<f32>,
    cadence_minutes: f64,
}

impl FrameSequence {
    pub fn new(frames: Array3<f32>, cadence_minutes: f64) -> Result<Self> {
        let seq = Self {
            frames,
            cadence_minutes,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub(crate) fn from_parts_unchecked(frames: Array3<f32>, cadence_minutes: f64) -> Self {
        Self {
            frames,
            cadence_minutes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cadence_minutes.is_finite() && self.cadence_minutes > 0.0) {
            return Err(Error::Data(format!(
                "cadence {} must be positive",
                self.cadence_minutes
            )));
        }
        if let Some(v) = self
            .frames
            .iter()
            .find(|v| !(0.0..=MAX_RAIN_RATE).contains(*v))
        {
            return Err(Error::Data(format!("rain rate {v} outside [0, 128]")));
        }
        Ok(())
    }

    pub fn frames(&self) -> &Array3<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array3<f32> {
        self.frames
    }

    pub fn cadence_minutes(&self) -> f64 {
        self.cadence_minutes
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }
}

/// Four past frames and the four frames that follow them.
#[derive(Debug, Clone, PartialEq)]
pub struct NowcastSample {
    pub inputs: Array3<f32>,
    pub targets: Array3<f32>,
}

/// Windows of eight consecutive frames starting at `0, stride, 2·stride, …`.
pub fn make_windows(seq: &FrameSequence, stride: usize) -> Result<Vec<NowcastSample>> {
    config_check!(stride >= 1, "window stride must be positive");
    if seq.len() < WINDOW {
        return Ok(Vec::new());
    }
    Ok((0..=seq.len() - WINDOW)
        .step_by(stride)
        .map(|start| NowcastSample {
            inputs: seq
                .frames
                .slice(s![start..start + INPUT_FRAMES, .., ..])
                .to_owned(),
            targets: seq
                .frames
                .slice(s![start + INPUT_FRAMES..start + WINDOW, .., ..])
                .to_owned(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `x / 64 − 1`
    #[default]
    Linear,
    /// `2·ln(1 + x) / ln(129) − 1`
    Log1p,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Normalization::Linear),
            "log1p" => Ok(Normalization::Log1p),
            other => Err(Error::Config(format!(
                "unknown normalization `{other}` (expected linear|log1p)"
            ))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Linear => "linear",
            Normalization::Log1p => "log1p",
        })
    }
}

impl Normalization {
    pub fn forward(self, x: f32) -> f32 {
        match self {
            Normalization::Linear => x / 64.0 - 1.0,
            Normalization::Log1p => 2.0 * x.ln_1p() / (MAX_RAIN_RATE + 1.0).ln() - 1.0,
        }
    }

    /// Inverse map, clipped to `[0, 128]`.
    pub fn inverse(self, y: f32) -> f32 {
        let x = match self {
            Normalization::Linear => (y + 1.0) * 64.0,
            Normalization::Log1p => ((y + 1.0) * 0.5 * (MAX_RAIN_RATE + 1.0).ln()).exp_m1(),
        };
        if x.is_nan() {
            0.0
        } else {
            x.clamp(0.0, MAX_RAIN_RATE)
        }
    }
}

/// mm/h → model space. Values outside `[0, 128]` break the contract.
pub fn normalize<D: Dimension>(
    field: ArrayView<'_, f32, D>,
    mode: Normalization,
) -> Result<Array<f32, D>> {
    if let Some(v) = field.iter().find(|v| !(0.0..=MAX_RAIN_RATE).contains(*v)) {
        contract!(false, "rain rate {v} outside [0, 128]");
    }
    Ok(field.mapv(|x| mode.forward(x)))
}

/// Model space → mm/h, clipped to `[0, 128]`.
pub fn denormalize<D: Dimension>(field: ArrayView<'_, f32, D>, mode: Normalization) -> Array<f32, D> {
    field.mapv(|y| mode.inverse(y))
}

/// Every `*.nrf` file directly inside `dir`, sorted by name.
pub fn list_nrf(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "nrf"))
        .collect();
    paths.sort();
    Ok(paths)
}
