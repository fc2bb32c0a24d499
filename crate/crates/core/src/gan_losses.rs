//! Generator losses of the adversarial nowcasting baselines.
//!
//! The discriminators themselves are not modelled; the losses take their
//! scores as plain numbers.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView3;

use crate::{contract, Error, Result};

/// The knee of the grid-cell weight, in mm/h.
pub const WEIGHT_KNEE: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// `max(i, 24)`
    #[default]
    Max24,
    /// `min(i, 24)`: heavy rain is capped rather than floored.
    Min24,
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max24" => Ok(WeightMode::Max24),
            "min24" => Ok(WeightMode::Min24),
            other => Err(Error::Config(format!(
                "unknown weight mode `{other}` (expected max24|min24)"
            ))),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Max24 => "max24",
            WeightMode::Min24 => "min24",
        })
    }
}

pub fn weight_fn(i: f64, mode: WeightMode) -> f64 {
    match mode {
        WeightMode::Max24 => i.max(WEIGHT_KNEE),
        WeightMode::Min24 => i.min(WEIGHT_KNEE),
    }
}

/// `(1/HWN) Σ |(gen_mean − target) ⊙ W(target)|` over `(N, H, W)` grids.
pub fn weighted_regularizer(
    gen_mean: ArrayView3<'_, f64>,
    target: ArrayView3<'_, f64>,
    mode: WeightMode,
) -> Result<f64> {
    contract!(
        gen_mean.dim() == target.dim(),
        "generator mean {:?} and target {:?} differ in shape",
        gen_mean.dim(),
        target.dim()
    );
    contract!(!target.is_empty(), "empty target grid");
    let mut sum = 0.0;
    for (g, x) in gen_mean.iter().zip(target.iter()) {
        sum += ((g - x) * weight_fn(*x, mode)).abs();
    }
    Ok(sum / target.len() as f64)
}

/// Everything the generator losses consume.
#[derive(Debug, Clone, Copy)]
pub struct GanLossInputs<'a> {
    /// Spatial discriminator score per sample.
    pub d_scores: &'a [f64],
    /// Temporal discriminator score per sample.
    pub t_scores: &'a [f64],
    /// Mean generated sequence over the latent draws, `(N, H, W)`.
    pub gen_mean: ArrayView3<'a, f64>,
    pub target: ArrayView3<'a, f64>,
    pub lambda: f64,
    pub weight_mode: WeightMode,
}

impl GanLossInputs<'_> {
    fn check(&self) -> Result<()> {
        contract!(
            !self.d_scores.is_empty() && !self.t_scores.is_empty(),
            "discriminator scores are empty"
        );
        contract!(self.lambda >= 0.0, "lambda must be nonnegative, got {}", self.lambda);
        Ok(())
    }

    fn regularizer(&self) -> Result<f64> {
        weighted_regularizer(self.gen_mean, self.target, self.weight_mode)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `mean(ReLU(1 − D)) + mean(ReLU(1 − T)) + λ·L_R`.
pub fn hinge_generator_loss(input: &GanLossInputs<'_>) -> Result<f64> {
    input.check()?;
    let hinge = |xs: &[f64]| mean(&xs.iter().map(|s| (1.0 - s).max(0.0)).collect::<Vec<_>>());
    Ok(hinge(input.d_scores) + hinge(input.t_scores) + input.lambda * input.regularizer()?)
}

/// `mean(D) + mean(T) − λ·L_R`, signs exactly as written for the baseline;
/// note that this grows with the discriminator scores.
pub fn nonhinge_generator_loss(input: &GanLossInputs<'_>) -> Result<f64> {
    input.check()?;
    Ok(mean(input.d_scores) + mean(input.t_scores) - input.lambda * input.regularizer()?)
}

/// Elementwise mean of several generated `(N, H, W)` sequences: the Monte
/// Carlo estimate of E_Z[G(Z)].
pub fn ensemble_mean(draws: &[ArrayView3<'_, f64>]) -> Result<ndarray::Array3<f64>> {
    contract!(!draws.is_empty(), "need at least one generator draw");
    let mut acc = draws[0].to_owned();
    for d in &draws[1..] {
        contract!(d.dim() == acc.dim(), "generator draws differ in shape");
        acc += d;
    }
    Ok(acc / draws.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn inputs<'a>(
        d: &'a [f64],
        t: &'a [f64],
        g: &'a Array3<f64>,
        x: &'a Array3<f64>,
        lambda: f64,
    ) -> GanLossInputs<'a> {
        GanLossInputs {
            d_scores: d,
            t_scores: t,
            gen_mean: g.view(),
            target: x.view(),
            lambda,
            weight_mode: WeightMode::Max24,
        }
    }

    #[test]
    fn weight_knee() {
        assert_eq!(weight_fn(0.0, WeightMode::Max24), 24.0);
        assert_eq!(weight_fn(24.0, WeightMode::Max24), 24.0);
        assert_eq!(weight_fn(100.0, WeightMode::Max24), 100.0);
        assert_eq!(weight_fn(100.0, WeightMode::Min24), 24.0);
        assert_eq!(weight_fn(3.0, WeightMode::Min24), 3.0);
    }

    #[test]
    fn regularizer_constant_cases() {
        let x = Array3::zeros((2, 3, 3));
        assert_eq!(weighted_regularizer(x.view(), x.view(), WeightMode::Max24).unwrap(), 0.0);
        let g = Array3::ones((2, 3, 3));
        assert_eq!(weighted_regularizer(g.view(), x.view(), WeightMode::Max24).unwrap(), 24.0);
        let bad = Array3::zeros((1, 3, 3));
        assert!(weighted_regularizer(bad.view(), x.view(), WeightMode::Max24).is_err());
    }

    #[test]
    fn hinge_values() {
        let z = Array3::zeros((1, 2, 2));
        let l = |d: f64, t: f64| hinge_generator_loss(&inputs(&[d], &[t], &z, &z, 0.0)).unwrap();
        assert_eq!(l(1.0, 1.0), 0.0);
        assert_eq!(l(0.0, 0.0), 2.0);
        assert_eq!(l(3.0, -1.0), 2.0);
    }

    #[test]
    fn nonhinge_values() {
        let z = Array3::zeros((1, 2, 2));
        let g = Array3::ones((1, 2, 2));
        let l = |d: f64, t: f64, g: &Array3<f64>, lam: f64| {
            nonhinge_generator_loss(&inputs(&[d], &[t], g, &z, lam)).unwrap()
        };
        assert_eq!(l(0.0, 0.0, &z, 0.0), 0.0);
        assert_eq!(l(1.0, 2.0, &z, 0.0), 3.0);
        assert_eq!(l(0.0, 0.0, &g, 1.0), -24.0);
    }

    #[test]
    fn rejects_negative_lambda_and_empty_scores() {
        let z = Array3::zeros((1, 2, 2));
        assert!(hinge_generator_loss(&inputs(&[0.0], &[0.0], &z, &z, -1.0)).is_err());
        assert!(hinge_generator_loss(&inputs(&[], &[0.0], &z, &z, 0.0)).is_err());
    }

    #[test]
    fn ensemble_mean_of_two_draws() {
        let a = Array3::from_elem((1, 2, 2), 1.0);
        let b = Array3::from_elem((1, 2, 2), 3.0);
        let m = ensemble_mean(&[a.view(), b.view()]).unwrap();
        assert!(m.iter().all(|v| *v == 2.0));
    }
}
