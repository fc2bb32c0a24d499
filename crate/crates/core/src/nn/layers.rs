use candle_core::{Tensor, Var};
use candle_nn::{GroupNorm, Module};

use super::{Init, Pass, Scope};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv2d {
    /// Square `kernel`×`kernel` convolution with "same" padding at stride 1.
    pub fn new(scope: Scope<'_>, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::with_options(scope, c_in, c_out, kernel, 1, kernel / 2, 1)
    }

    pub fn with_options(
        scope: Scope<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let init = Init::fan_in(c_in * kernel * kernel);
        let weight = scope.param("weight", (c_out, c_in, kernel, kernel), init)?;
        let bias = scope.param("bias", c_out, init)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            dilation,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x
            .contiguous()?
            .conv2d(&self.weight, self.padding, self.stride, self.dilation, 1)?;
        let c = self.bias.dims1()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: Scope<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let init = Init::fan_in(d_in);
        Ok(Self {
            weight: scope.param("weight", (d_out, d_in), init)?,
            bias: scope.param("bias", d_out, init)?,
        })
    }

    /// `x` is `(batch, d_in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalization with the largest group count in {8, 4, 2, 1} that
/// divides `channels`.
pub fn group_norm(scope: Scope<'_>, channels: usize) -> Result<GroupNorm> {
    let groups = [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1);
    let weight = scope.param("weight", channels, Init::Const(1.0))?;
    let bias = scope.param("bias", channels, Init::Const(0.0))?;
    Ok(GroupNorm::new(weight, bias, channels, groups, 1e-5)?)
}

/// Batch normalization over `(N, H, W)` with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(scope: Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", channels, Init::Const(1.0))?,
            beta: scope.param("beta", channels, Init::Const(0.0))?,
            running_mean: scope.buffer("running_mean", channels, Init::Const(0.0))?,
            running_var: scope.buffer("running_var", channels, Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if pass.is_train() {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 {
                (var.detach() * (count / (count - 1.0)))?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Nearest-neighbour ×2 upsampling of an `(N, C, H, W)` map, built from
/// reshape and broadcast so that its backward pass accumulates correctly.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// 2×2 average pooling with stride 2, as a reshape and mean. candle's own
/// pooling backward mishandles gradients that arrive as strided views.
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.contiguous()?
        .reshape((n, c, h / 2, 2, w / 2, 2))?
        .mean(5)?
        .mean(3)?)
}

pub(crate) fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub(crate) fn apply<M: Module>(m: &M, x: &Tensor) -> Result<Tensor> {
    Ok(m.forward(x)?)
}
