//! Run configuration as plain `key = value` text.
//!
//! Values are resolved as command-line override > config file > default. The
//! effective configuration prints back in the same syntax, so a printed
//! config can be fed in again unchanged.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::condition::TauConfig;
use crate::data::Normalization;
use crate::denoiser::DenoiserConfig;
use crate::gan_losses::WeightMode;
use crate::metrics::{HssMode, ReportOptions};
use crate::model::ModelConfig;
use crate::schedule::{DiffusionSchedule, SigmaMode};
use crate::{config_check, Error, Result, TARGET_FRAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub resolution: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
    pub levels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub embed_dim: usize,
    pub tau_depth: Option<usize>,
    pub tau_attention: bool,
    pub attention_threshold: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub train_steps: u64,
    pub checkpoint_every: u64,
    pub window_stride: usize,
    pub normalization: Normalization,
    pub seed: u64,
    pub synth_count: usize,
    pub synth_frames: usize,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub fss_n: usize,
    pub fss_threshold: f64,
    pub hss_mode: HssMode,
    pub weight_mode: WeightMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        let tau = TauConfig::default();
        Self {
            resolution: d.resolution,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_mode: SigmaMode::Beta,
            levels: d.levels,
            base_channels: d.base_channels,
            channel_mults: d.channel_mults,
            attention_levels: d.attention_levels,
            embed_dim: d.embed_dim,
            tau_depth: tau.depth,
            tau_attention: tau.attention,
            attention_threshold: tau.attention_threshold,
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            train_steps: 33_000_000,
            checkpoint_every: 1000,
            window_stride: 4,
            normalization: Normalization::Linear,
            seed: 0,
            synth_count: 16,
            synth_frames: 24,
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("raindiff.ckpt"),
            loss_log: PathBuf::from("loss.csv"),
            fss_n: 9,
            fss_threshold: 2.0,
            hss_mode: HssMode::Standard,
            weight_mode: WeightMode::Max24,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "resolution" => self.resolution = parse(key, v)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "sigma_mode" => self.sigma_mode = v.parse()?,
            "levels" => self.levels = parse(key, v)?,
            "base_channels" => self.base_channels = parse(key, v)?,
            "channel_mults" => self.channel_mults = parse_list(key, v)?,
            "attention_levels" => self.attention_levels = parse_list(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "tau_depth" => {
                self.tau_depth = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "tau_attention" => self.tau_attention = parse(key, v)?,
            "attention_threshold" => self.attention_threshold = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "train_steps" => self.train_steps = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "window_stride" => self.window_stride = parse(key, v)?,
            "normalization" => self.normalization = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "synth_count" => self.synth_count = parse(key, v)?,
            "synth_frames" => self.synth_frames = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "loss_log" => self.loss_log = PathBuf::from(v),
            "fss_n" => self.fss_n = parse(key, v)?,
            "fss_threshold" => self.fss_threshold = parse(key, v)?,
            "hss_mode" => self.hss_mode = v.parse()?,
            "weight_mode" => self.weight_mode = v.parse()?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn to_text(&self) -> String {
        let tau_depth = self
            .tau_depth
            .map_or_else(|| "auto".to_string(), |d| d.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("resolution", self.resolution.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("sigma_mode", self.sigma_mode.to_string()),
            ("levels", self.levels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("channel_mults", join(&self.channel_mults)),
            ("attention_levels", join(&self.attention_levels)),
            ("embed_dim", self.embed_dim.to_string()),
            ("tau_depth", tau_depth),
            ("tau_attention", self.tau_attention.to_string()),
            ("attention_threshold", self.attention_threshold.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("train_steps", self.train_steps.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("window_stride", self.window_stride.to_string()),
            ("normalization", self.normalization.to_string()),
            ("seed", self.seed.to_string()),
            ("synth_count", self.synth_count.to_string()),
            ("synth_frames", self.synth_frames.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("loss_log", self.loss_log.display().to_string()),
            ("fss_n", self.fss_n.to_string()),
            ("fss_threshold", self.fss_threshold.to_string()),
            ("hss_mode", self.hss_mode.to_string()),
            ("weight_mode", self.weight_mode.to_string()),
        ];
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        config_check!(
            self.resolution >= 16 && self.resolution % 16 == 0,
            "resolution {} must be a positive multiple of 16",
            self.resolution
        );
        self.model()?.denoiser.validate()?;
        config_check!(self.batch_size >= 1, "batch size must be positive");
        config_check!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning rate must be positive"
        );
        config_check!(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            "Adam betas must lie in [0, 1)"
        );
        config_check!(self.adam_eps > 0.0, "Adam epsilon must be positive");
        config_check!(self.window_stride >= 1, "window stride must be positive");
        config_check!(self.checkpoint_every >= 1, "checkpoint interval must be positive");
        config_check!(
            self.fss_n >= 1 && self.fss_n % 2 == 1,
            "FSS neighbourhood must be odd and positive, got {}",
            self.fss_n
        );
        self.schedule()?;
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let denoiser = DenoiserConfig {
            resolution: self.resolution,
            levels: self.levels,
            base_channels: self.base_channels,
            channel_mults: self.channel_mults.clone(),
            attention_levels: self.attention_levels.clone(),
            input_channels: TARGET_FRAMES,
            embed_dim: self.embed_dim,
        };
        denoiser.validate()?;
        Ok(ModelConfig {
            denoiser,
            tau: TauConfig {
                depth: self.tau_depth,
                attention: self.tau_attention,
                attention_threshold: self.attention_threshold,
            },
        })
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear_with_sigma(
            self.diffusion_steps,
            self.beta_start,
            self.beta_end,
            self.sigma_mode,
        )
    }

    pub fn report_options(&self) -> ReportOptions {
        ReportOptions {
            fss_n: self.fss_n,
            fss_threshold: self.fss_threshold,
            hss_mode: self.hss_mode,
        }
    }
}
