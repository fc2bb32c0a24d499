//! The noise-prediction UNet.
//!
//! Encoder level `k` (1-based) runs at `resolution / 2^(k-1)` with
//! `base_channels * channel_mults[k-1]` channels. Each level is a residual
//! block (plus self-attention on the configured low-resolution levels); its
//! output is summed with condition map `k` and that fused map feeds both the
//! next level (through 2×2 average pooling) and the decoder skip connection.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::GroupNorm;

use crate::condition::ConditionPyramid;
use crate::diffusion::NoisePredictor;
use crate::nn::{self, avg_pool2x, group_norm, upsample2x, Conv2d, Linear, Pass, Scope};
use crate::{config_check, contract, Result, TARGET_FRAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Spatial size of the (square) input grid.
    pub resolution: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// 1-based levels that carry self-attention.
    pub attention_levels: Vec<usize>,
    pub input_channels: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            levels: 5,
            base_channels: 32,
            channel_mults: vec![1, 2, 4, 8, 8],
            attention_levels: vec![4, 5],
            input_channels: TARGET_FRAMES,
            embed_dim: 128,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        config_check!(self.levels >= 2, "denoiser needs at least 2 levels");
        config_check!(
            self.channel_mults.len() == self.levels,
            "{} channel multipliers for {} levels",
            self.channel_mults.len(),
            self.levels
        );
        config_check!(
            self.base_channels > 0 && self.channel_mults.iter().all(|m| *m > 0),
            "channel counts must be positive"
        );
        config_check!(
            self.attention_levels
                .iter()
                .all(|l| (1..=self.levels).contains(l)),
            "attention levels {:?} outside 1..={}",
            self.attention_levels,
            self.levels
        );
        config_check!(
            self.embed_dim > 0 && self.embed_dim % 2 == 0,
            "embedding width must be even and positive, got {}",
            self.embed_dim
        );
        config_check!(self.input_channels > 0, "input channels must be positive");
        let div = 1usize << (self.levels - 1);
        config_check!(
            self.resolution >= div && self.resolution % div == 0,
            "resolution {} must be a positive multiple of {div} for {} levels",
            self.resolution,
            self.levels
        );
        Ok(())
    }

    /// Channel count at 1-based level `k`.
    pub fn channels(&self, k: usize) -> usize {
        self.base_channels * self.channel_mults[k - 1]
    }

    /// Spatial size at 1-based level `k`.
    pub fn level_size(&self, k: usize) -> usize {
        self.resolution >> (k - 1)
    }

    pub fn has_attention(&self, k: usize) -> bool {
        self.attention_levels.contains(&k)
    }
}

/// Sinusoidal encoding of each step: `[sin(t·f_0..f_{d/2}), cos(t·f_0..f_{d/2})]`
/// with `f_i = 10000^(-i/(d/2))`. Returns `(steps.len(), dim)`.
pub fn sinusoidal_embedding(
    steps: &[usize],
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    config_check!(
        dim > 0 && dim % 2 == 0,
        "embedding width must be even, got {dim}"
    );
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut values = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let t = t as f64;
        values.extend(freqs.iter().map(|f| (t * f).sin()));
        values.extend(freqs.iter().map(|f| (t * f).cos()));
    }
    Ok(Tensor::from_vec(values, (steps.len(), dim), device)?.to_dtype(dtype)?)
}

/// Sinusoidal base followed by a learned `Linear → SiLU → Linear` map.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(scope: Scope<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            fc1: scope.with("fc1", |s| Linear::new(s, dim, dim))?,
            fc2: scope.with("fc2", |s| Linear::new(s, dim, dim))?,
        })
    }

    pub fn forward(&self, steps: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let base = sinusoidal_embedding(steps, self.dim, dtype, device)?;
        self.fc2.forward(&nn::silu(&self.fc1.forward(&base)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(scope: Scope<'_>, c_in: usize, c_out: usize, embed_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: scope.with("norm1", |s| group_norm(s, c_in))?,
            conv1: scope.with("conv1", |s| Conv2d::new(s, c_in, c_out, 3))?,
            temb_proj: scope.with("temb_proj", |s| Linear::new(s, embed_dim, c_out))?,
            norm2: scope.with("norm2", |s| group_norm(s, c_out))?,
            conv2: scope.with("conv2", |s| Conv2d::new(s, c_out, c_out, 3))?,
            shortcut: if c_in != c_out {
                Some(scope.with("shortcut", |s| Conv2d::new(s, c_in, c_out, 1))?)
            } else {
                None
            },
        })
    }

    /// The last convolution of the residual branch.
    pub fn output_conv(&self) -> &Conv2d {
        &self.conv2
    }

    pub fn shortcut(&self, x: &Tensor) -> Result<Tensor> {
        match &self.shortcut {
            Some(conv) => conv.forward(x),
            None => Ok(x.clone()),
        }
    }

    /// `x` is `(B, C_in, H, W)`, `temb` is `(B, embed_dim)`.
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = nn::apply(&self.norm1, x)?;
        let h = self.conv1.forward(&nn::silu(&h)?)?;
        let t = self.temb_proj.forward(&nn::silu(temb)?)?;
        let h = h.broadcast_add(&t.unsqueeze(2)?.unsqueeze(3)?)?;
        let h = nn::apply(&self.norm2, &h)?;
        let h = self.conv2.forward(&nn::silu(&h)?)?;
        contract!(
            h.dims()[2..] == x.dims()[2..],
            "residual block changed the spatial size"
        );
        Ok((h + self.shortcut(x)?)?)
    }
}

/// Single-head scaled dot-product self-attention over the flattened spatial
/// grid, added residually.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    channels: usize,
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
}

impl SelfAttention {
    pub fn new(scope: Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            norm: scope.with("norm", |s| group_norm(s, channels))?,
            qkv: scope.with("qkv", |s| Conv2d::new(s, channels, 3 * channels, 1))?,
            proj: scope.with("proj", |s| Conv2d::new(s, channels, channels, 1))?,
        })
    }

    fn qkv(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&nn::apply(&self.norm, x)?)?;
        let qkv = qkv.reshape((b, 3, c, h * w))?;
        // (B, HW, C) queries and keys, (B, C, HW) values
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?.contiguous()?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?.contiguous()?;
        Ok((q, k, v))
    }

    /// Attention weights `(B, HW, HW)`; row `i` is the distribution of query `i`.
    pub fn attention_weights(&self, x: &Tensor) -> Result<Tensor> {
        let (q, k, _) = self.qkv(x)?;
        let scores = (q.matmul(&k)? * (1.0 / (self.channels as f64).sqrt()))?;
        Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
    }

    /// The value-then-output projection applied without attention mixing.
    pub fn value_path(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (_, _, v) = self.qkv(x)?;
        self.proj.forward(&v.reshape((b, c, h, w))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (q, k, v) = self.qkv(x)?;
        let scores = (q.matmul(&k)? * (1.0 / (self.channels as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        // out[c, i] = Σ_j v[c, j] attn[i, j]
        let out = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?;
        let out = self.proj.forward(&out.reshape((b, c, h, w))?)?;
        Ok((x + out)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResidualBlock,
    attn: Option<SelfAttention>,
}

impl Level {
    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, temb)?;
        match &self.attn {
            Some(attn) => attn.forward(&h),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    time: TimeEmbedding,
    input_conv: Conv2d,
    down: Vec<Level>,
    mid: Level,
    up: Vec<Level>,
    up_convs: Vec<Conv2d>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Denoiser {
    pub fn new(scope: Scope<'_>, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let time = scope.with("time", |s| TimeEmbedding::new(s, e))?;
        let input_conv =
            scope.with("input", |s| Conv2d::new(s, cfg.input_channels, cfg.channels(1), 3))?;
        let level = |s: Scope<'_>, k: usize, c_in: usize, c_out: usize| -> Result<Level> {
            Ok(Level {
                res: s.with("res", |s| ResidualBlock::new(s, c_in, c_out, e))?,
                attn: if cfg.has_attention(k) {
                    Some(s.with("attn", |s| SelfAttention::new(s, c_out))?)
                } else {
                    None
                },
            })
        };
        let mut down = Vec::with_capacity(cfg.levels);
        for k in 1..=cfg.levels {
            let c_in = if k == 1 { cfg.channels(1) } else { cfg.channels(k - 1) };
            down.push(scope.with(format!("down{k}"), |s| level(s, k, c_in, cfg.channels(k)))?);
        }
        let deepest = cfg.channels(cfg.levels);
        let mid = scope.with("mid", |s| level(s, cfg.levels, deepest, deepest))?;
        let mut up = Vec::with_capacity(cfg.levels);
        let mut up_convs = Vec::with_capacity(cfg.levels - 1);
        for k in 1..=cfg.levels {
            let c = cfg.channels(k);
            up.push(scope.with(format!("up{k}"), |s| level(s, k, 2 * c, c))?);
            if k > 1 {
                up_convs.push(scope.with(format!("upsample{k}"), |s| {
                    Conv2d::new(s, c, cfg.channels(k - 1), 3)
                })?);
            }
        }
        let c1 = cfg.channels(1);
        Ok(Self {
            cfg: cfg.clone(),
            time,
            input_conv,
            down,
            mid,
            up,
            up_convs,
            out_norm: scope.with("out_norm", |s| group_norm(s, c1))?,
            out_conv: scope.with("out_conv", |s| Conv2d::new(s, c1, cfg.input_channels, 3))?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn check_inputs(&self, x_t: &Tensor, steps: &[usize], cond: Option<&ConditionPyramid>) -> Result<()> {
        let (b, c, h, w) = x_t.dims4()?;
        let r = self.cfg.resolution;
        contract!(
            c == self.cfg.input_channels && h == r && w == r,
            "denoiser expects (B, {}, {r}, {r}), got {:?}",
            self.cfg.input_channels,
            x_t.dims()
        );
        contract!(steps.len() == b, "{} steps for a batch of {b}", steps.len());
        if let Some(cond) = cond {
            cond.check(&self.cfg, b)?;
        }
        Ok(())
    }

    /// Predicted noise plus the fused encoder features of every level.
    pub fn forward_traced(
        &self,
        x_t: &Tensor,
        steps: &[usize],
        cond: Option<&ConditionPyramid>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_inputs(x_t, steps, cond)?;
        let temb = self.time.forward(steps, x_t.dtype(), x_t.device())?;
        let mut h = self.input_conv.forward(x_t)?;
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for (i, level) in self.down.iter().enumerate() {
            if i > 0 {
                h = avg_pool2x(&h)?;
            }
            h = level.forward(&h, &temb)?;
            if let Some(cond) = cond {
                h = (h + &cond.maps()[i])?;
            }
            skips.push(h.clone());
        }
        h = self.mid.forward(&h, &temb)?;
        for i in (0..self.cfg.levels).rev() {
            h = Tensor::cat(&[&h, &skips[i]], 1)?;
            h = self.up[i].forward(&h, &temb)?;
            if i > 0 {
                h = self.up_convs[i - 1].forward(&upsample2x(&h)?)?;
            }
        }
        let h = nn::silu(&nn::apply(&self.out_norm, &h)?)?;
        Ok((self.out_conv.forward(&h)?, skips))
    }

    /// ε̂ with the same shape as `x_t`. `cond = None` disables fusion.
    pub fn forward(
        &self,
        x_t: &Tensor,
        steps: &[usize],
        cond: Option<&ConditionPyramid>,
    ) -> Result<Tensor> {
        Ok(self.forward_traced(x_t, steps, cond)?.0)
    }

    /// The residual block of encoder level `k` (1-based).
    pub fn encoder_block(&self, k: usize) -> &ResidualBlock {
        &self.down[k - 1].res
    }
}

/// Unconditional use: the frames passed to the sampler only fix the shape.
impl NoisePredictor for Denoiser {
    type Condition = ();

    fn condition(&self, _frames: &Tensor, _pass: &Pass) -> Result<()> {
        Ok(())
    }

    fn predict_noise(&self, x_t: &Tensor, steps: &[usize], _c: &()) -> Result<Tensor> {
        self.forward(x_t, steps, None)
    }
}
