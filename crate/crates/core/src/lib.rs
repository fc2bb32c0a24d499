//! Conditional denoising diffusion for short-term radar rainfall nowcasting.
//!
//! Four past rainfall frames are encoded into a multi-resolution condition
//! pyramid which is added into the encoder levels of a noise-predicting UNet.
//! Forecasts of the next four frames are drawn with ancestral DDPM sampling.
//! The crate also carries the verification metrics (CSI, HSS, FSS, MSE) and
//! the GAN baseline generator losses used for comparison.

pub mod commands;
pub mod condition;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod gan_losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
pub(crate) use error::{config_check, contract};

pub use condition::{ConditionEncoder, ConditionPyramid, TauConfig};
pub use config::RunConfig;
pub use data::{FrameSequence, NowcastSample};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use diffusion::{NoisePredictor, NoisyState};
pub use metrics::SkillReport;
pub use model::{ModelConfig, NowcastModel};
pub use schedule::{DiffusionSchedule, SigmaMode};

/// Number of past frames fed to the condition encoder.
pub const INPUT_FRAMES: usize = 4;
/// Number of future frames generated per forecast.
pub const TARGET_FRAMES: usize = 4;
/// Highest rainfall intensity representable, in mm/h.
pub const MAX_RAIN_RATE: f32 = 128.0;
