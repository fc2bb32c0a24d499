//! Condition encoder: stacked TAU blocks over the past frames.
//!
//! A TAU block is a nested U-shaped residual unit (RSU). Each of its conv
//! units may be preceded by triplet attention, which is switched on for a
//! stage only when that stage's map is small enough. Blocks are chained with
//! stride-2 convolutions, so block `k` sees the input at `1/2^(k-1)` scale and
//! emits the condition map for denoiser level `k`.

use candle_core::Tensor;

use crate::denoiser::DenoiserConfig;
use crate::nn::{avg_pool2x, upsample2x, BatchNorm2d, Conv2d, Pass, Scope};
use crate::{config_check, contract, Result, INPUT_FRAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct TauConfig {
    /// Number of internal pooling stages; `None` picks `min(4, log2(size) - 1)`
    /// per block.
    pub depth: Option<usize>,
    pub attention: bool,
    /// Triplet attention runs on stages whose height and width are both at
    /// most this size.
    pub attention_threshold: usize,
}

impl Default for TauConfig {
    fn default() -> Self {
        Self {
            depth: None,
            attention: true,
            attention_threshold: 32,
        }
    }
}

impl TauConfig {
    /// Internal depth used for a block whose input is `size`×`size`.
    pub fn depth_for(&self, size: usize) -> usize {
        self.depth.unwrap_or_else(|| {
            let log2 = size.max(1).ilog2() as usize;
            log2.saturating_sub(1).min(4)
        })
    }
}

/// Concatenation of the max and the mean over dimension 1.
pub fn z_pool(x: &Tensor, pass: &Pass) -> Result<Tensor> {
    let max = pass.max_keepdim(x, 1)?;
    let mean = x.mean_keepdim(1)?;
    Ok(Tensor::cat(&[&max, &mean], 1)?)
}

#[derive(Debug, Clone)]
struct AttentionGate {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl AttentionGate {
    fn new(scope: Scope<'_>) -> Result<Self> {
        Ok(Self {
            conv: scope.with("conv", |s| Conv2d::new(s, 2, 1, 7))?,
            bn: scope.with("bn", |s| BatchNorm2d::new(s, 1))?,
        })
    }

    /// `x * sigmoid(bn(conv(z_pool(x))))`.
    fn forward(&self, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        let g = self.bn.forward(&self.conv.forward(&z_pool(x, pass)?)?, pass)?;
        Ok(x.broadcast_mul(&candle_nn::ops::sigmoid(&g)?)?)
    }
}

/// Three gates over `(C,H,W)`, `(H,C,W)` and `(W,H,C)` orientations, averaged.
#[derive(Debug, Clone)]
pub struct TripletAttention {
    channel_height: AttentionGate,
    channel_width: AttentionGate,
    spatial: AttentionGate,
}

impl TripletAttention {
    pub fn new(scope: Scope<'_>) -> Result<Self> {
        Ok(Self {
            channel_height: scope.with("cw", AttentionGate::new)?,
            channel_width: scope.with("hc", AttentionGate::new)?,
            spatial: scope.with("hw", AttentionGate::new)?,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        // (B, H, C, W): pool over H
        let a = x.permute((0, 2, 1, 3))?;
        let a = self.channel_height.forward(&a, pass)?.permute((0, 2, 1, 3))?;
        // (B, W, H, C): pool over W
        let b = x.permute((0, 3, 2, 1))?;
        let b = self.channel_width.forward(&b, pass)?.permute((0, 3, 2, 1))?;
        let c = self.spatial.forward(x, pass)?;
        Ok(((a + b)? + c)?.affine(1.0 / 3.0, 0.0)?)
    }
}

/// Optional triplet attention, then conv, batch norm and ReLU.
#[derive(Debug, Clone)]
struct ConvUnit {
    attention: Option<TripletAttention>,
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvUnit {
    fn new(
        scope: Scope<'_>,
        c_in: usize,
        c_out: usize,
        dilation: usize,
        attention: bool,
    ) -> Result<Self> {
        Ok(Self {
            attention: if attention {
                Some(scope.with("ta", TripletAttention::new)?)
            } else {
                None
            },
            conv: scope.with("conv", |s| {
                Conv2d::with_options(s, c_in, c_out, 3, 1, dilation, dilation)
            })?,
            bn: scope.with("bn", |s| BatchNorm2d::new(s, c_out))?,
        })
    }

    fn forward(&self, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        let h = match &self.attention {
            Some(ta) => ta.forward(x, pass)?,
            None => x.clone(),
        };
        let h = self.bn.forward(&self.conv.forward(&h)?, pass)?;
        pass.relu(&h)
    }
}

/// One nested-UNet block. Stage `i` runs at `size / 2^i` for `i` in `0..=depth`.
#[derive(Debug, Clone)]
pub struct TauBlock {
    size: usize,
    c_in: usize,
    c_out: usize,
    gates: Vec<bool>,
    input: ConvUnit,
    encoder: Vec<ConvUnit>,
    bottom: ConvUnit,
    decoder: Vec<ConvUnit>,
}

impl TauBlock {
    pub fn new(
        scope: Scope<'_>,
        size: usize,
        c_in: usize,
        c_out: usize,
        cfg: &TauConfig,
    ) -> Result<Self> {
        let depth = cfg.depth_for(size);
        config_check!(
            size >= 1 << depth && size % (1 << depth) == 0,
            "a {size}x{size} map cannot be pooled {depth} times"
        );
        let gates: Vec<bool> = (0..=depth)
            .map(|i| cfg.attention && (size >> i) <= cfg.attention_threshold)
            .collect();
        let mid = (c_out / 2).max(2);
        let input = scope.with("in", |s| ConvUnit::new(s, c_in, c_out, 1, gates[0]))?;
        let mut encoder = Vec::with_capacity(depth + 1);
        for (i, &gate) in gates.iter().enumerate() {
            let ci = if i == 0 { c_out } else { mid };
            encoder.push(scope.with(format!("enc{i}"), |s| ConvUnit::new(s, ci, mid, 1, gate))?);
        }
        let bottom = scope.with("bottom", |s| ConvUnit::new(s, mid, mid, 2, gates[depth]))?;
        let mut decoder = Vec::with_capacity(depth + 1);
        for (i, &gate) in gates.iter().enumerate() {
            let co = if i == 0 { c_out } else { mid };
            decoder.push(scope.with(format!("dec{i}"), |s| {
                ConvUnit::new(s, 2 * mid, co, 1, gate)
            })?);
        }
        Ok(Self {
            size,
            c_in,
            c_out,
            gates,
            input,
            encoder,
            bottom,
            decoder,
        })
    }

    pub fn depth(&self) -> usize {
        self.gates.len() - 1
    }

    /// `(stage size, attention active)` for every internal stage, outermost first.
    pub fn stage_gates(&self) -> Vec<(usize, bool)> {
        self.gates
            .iter()
            .enumerate()
            .map(|(i, g)| (self.size >> i, *g))
            .collect()
    }

    pub fn forward(&self, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        contract!(
            c == self.c_in && h == self.size && w == self.size,
            "TAU block expects {} channels at {}x{}, got {:?}",
            self.c_in,
            self.size,
            self.size,
            x.dims()
        );
        let hx = self.input.forward(x, pass)?;
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut h = hx.clone();
        for (i, unit) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = avg_pool2x(&h)?;
            }
            h = unit.forward(&h, pass)?;
            feats.push(h.clone());
        }
        let mut d = self.bottom.forward(&h, pass)?;
        for i in (0..self.decoder.len()).rev() {
            if i + 1 < self.decoder.len() {
                d = upsample2x(&d)?;
            }
            d = self.decoder[i].forward(&Tensor::cat(&[&d, &feats[i]], 1)?, pass)?;
        }
        Ok((d + hx)?)
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }
}

/// One condition map per denoiser level, finest first.
#[derive(Debug, Clone)]
pub struct ConditionPyramid {
    maps: Vec<Tensor>,
}

impl ConditionPyramid {
    pub fn new(maps: Vec<Tensor>) -> Self {
        Self { maps }
    }

    /// All-zero maps shaped for `cfg` and `batch`.
    pub fn zeros(cfg: &DenoiserConfig, batch: usize, like: &Tensor) -> Result<Self> {
        let maps = (1..=cfg.levels)
            .map(|k| {
                let s = cfg.level_size(k);
                Tensor::zeros((batch, cfg.channels(k), s, s), like.dtype(), like.device())
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Checks level count, channels and resolutions against a denoiser layout.
    pub fn check(&self, cfg: &DenoiserConfig, batch: usize) -> Result<()> {
        contract!(
            self.maps.len() == cfg.levels,
            "pyramid has {} maps, denoiser has {} levels",
            self.maps.len(),
            cfg.levels
        );
        for (i, m) in self.maps.iter().enumerate() {
            let k = i + 1;
            let s = cfg.level_size(k);
            let want = [batch, cfg.channels(k), s, s];
            contract!(
                m.dims() == want,
                "condition map {k} has shape {:?}, expected {want:?}",
                m.dims()
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    resolution: usize,
    blocks: Vec<TauBlock>,
    downsamples: Vec<Conv2d>,
}

impl ConditionEncoder {
    /// Builds one TAU block per denoiser level with matching channel counts.
    pub fn new(scope: Scope<'_>, denoiser: &DenoiserConfig, tau: &TauConfig) -> Result<Self> {
        denoiser.validate()?;
        config_check!(
            tau.attention_threshold >= 1,
            "attention threshold must be positive"
        );
        let mut blocks = Vec::with_capacity(denoiser.levels);
        let mut downsamples = Vec::with_capacity(denoiser.levels - 1);
        for k in 1..=denoiser.levels {
            let c_in = if k == 1 {
                INPUT_FRAMES
            } else {
                denoiser.channels(k - 1)
            };
            if k > 1 {
                let c = denoiser.channels(k - 1);
                downsamples.push(scope.with(format!("down{k}"), |s| {
                    Conv2d::with_options(s, c, c, 3, 2, 1, 1)
                })?);
            }
            let size = denoiser.level_size(k);
            blocks.push(scope.with(format!("tau{k}"), |s| {
                TauBlock::new(s, size, c_in, denoiser.channels(k), tau)
            })?);
        }
        Ok(Self {
            resolution: denoiser.resolution,
            blocks,
            downsamples,
        })
    }

    pub fn blocks(&self) -> &[TauBlock] {
        &self.blocks
    }

    /// `frames` is `(B, 4, H, W)` in model space.
    pub fn forward(&self, frames: &Tensor, pass: &Pass) -> Result<ConditionPyramid> {
        let (_, c, h, w) = frames.dims4()?;
        let r = self.resolution;
        contract!(
            c == INPUT_FRAMES && h == r && w == r,
            "condition encoder expects (B, {INPUT_FRAMES}, {r}, {r}), got {:?}",
            frames.dims()
        );
        let mut maps = Vec::with_capacity(self.blocks.len());
        let mut x = frames.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                x = self.downsamples[i - 1].forward(&x)?;
            }
            x = block.forward(&x, pass)?;
            maps.push(x.clone());
        }
        Ok(ConditionPyramid { maps })
    }
}

/// Fraction of attention-active stages in each block, finest block first.
pub fn attention_coverage(encoder: &ConditionEncoder) -> Vec<f64> {
    encoder
        .blocks()
        .iter()
        .map(|b| {
            let g = b.stage_gates();
            g.iter().filter(|(_, on)| *on).count() as f64 / g.len() as f64
        })
        .collect()
}
