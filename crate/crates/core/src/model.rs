//! The full conditional model: condition encoder plus denoiser, sharing one
//! parameter store so they train jointly.

use candle_core::{DType, Device, Tensor};

use crate::condition::{ConditionEncoder, ConditionPyramid, TauConfig};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::NoisePredictor;
use crate::nn::{ParamStore, Pass, Scope};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub tau: TauConfig,
}

pub struct NowcastModel {
    cfg: ModelConfig,
    params: ParamStore,
    buffers: ParamStore,
    encoder: ConditionEncoder,
    denoiser: Denoiser,
}

impl NowcastModel {
    /// Builds and initializes every parameter from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let params = ParamStore::new(seed, dtype, device);
        let buffers = ParamStore::new(seed, dtype, device);
        let scope = Scope::new(&params, &buffers);
        let encoder = scope.with("encoder", |s| ConditionEncoder::new(s, &cfg.denoiser, &cfg.tau))?;
        let denoiser = scope.with("denoiser", |s| Denoiser::new(s, &cfg.denoiser))?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            buffers,
            encoder,
            denoiser,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn encoder(&self) -> &ConditionEncoder {
        &self.encoder
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn resolution(&self) -> usize {
        self.cfg.denoiser.resolution
    }
}

impl NoisePredictor for NowcastModel {
    type Condition = ConditionPyramid;

    fn condition(&self, frames: &Tensor, pass: &Pass) -> Result<ConditionPyramid> {
        self.encoder.forward(frames, pass)
    }

    fn predict_noise(
        &self,
        x_t: &Tensor,
        steps: &[usize],
        condition: &ConditionPyramid,
    ) -> Result<Tensor> {
        self.denoiser.forward(x_t, steps, Some(condition))
    }
}
