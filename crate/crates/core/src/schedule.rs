//! Forward-process noise schedule.
//!
//! Steps are addressed 1-based (`1..=steps`) everywhere in the public API;
//! storage is 0-based.

use std::fmt;
use std::str::FromStr;

use crate::{config_check, contract, Error, Result};

/// Choice of the reverse-process noise scale σ_t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// σ_t² = β_t
    #[default]
    Beta,
    /// σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t), the true posterior variance.
    Posterior,
}

impl FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SigmaMode::Beta),
            "posterior" => Ok(SigmaMode::Posterior),
            other => Err(Error::Config(format!(
                "unknown sigma mode `{other}` (expected beta|posterior)"
            ))),
        }
    }
}

impl fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SigmaMode::Beta => "beta",
            SigmaMode::Posterior => "posterior",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear β schedule from `beta_start` to `beta_end` over `steps` steps,
    /// with σ_t = √β_t.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::linear_with_sigma(steps, beta_start, beta_end, SigmaMode::Beta)
    }

    pub fn linear_with_sigma(
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        sigma: SigmaMode,
    ) -> Result<Self> {
        config_check!(steps >= 1, "diffusion steps must be positive");
        config_check!(
            beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        );
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas, sigma)
    }

    pub fn from_betas(betas: Vec<f64>, sigma: SigmaMode) -> Result<Self> {
        config_check!(!betas.is_empty(), "diffusion steps must be positive");
        config_check!(
            betas.iter().all(|b| *b > 0.0 && *b < 1.0),
            "every beta must lie in (0, 1)"
        );
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = match sigma {
            SigmaMode::Beta => betas.iter().map(|b| b.sqrt()).collect(),
            SigmaMode::Posterior => (0..betas.len())
                .map(|i| {
                    let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                    (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
                })
                .collect(),
        };
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        contract!(
            (1..=self.steps()).contains(&t),
            "step {t} outside 1..={}",
            self.steps()
        );
        Ok(())
    }

    /// β_t for 1-based `t`. Panics when `t` is out of range.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_product() {
        let s = DiffusionSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
    }

    #[test]
    fn two_step_product() {
        let s = DiffusionSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha(1), 1.0 - s.beta(1));
    }

    #[test]
    fn default_schedule_end_value() {
        // Cumulative product computed independently with an explicit loop.
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-18);
        // ≈ 4.04e-5
        assert!(prod > 4.0e-5 && prod < 4.1e-5, "{prod}");
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(matches!(
            DiffusionSchedule::linear(0, 1e-4, 0.02),
            Err(Error::Config(_))
        ));
        assert!(DiffusionSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(DiffusionSchedule::linear(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn posterior_sigma_vanishes_at_first_step() {
        let s = DiffusionSchedule::linear_with_sigma(50, 1e-3, 0.2, SigmaMode::Posterior).unwrap();
        assert_eq!(s.sigma(1), 0.0);
        for t in 2..=50 {
            assert!(s.sigma(t) > 0.0 && s.sigma(t) <= s.beta(t).sqrt() + 1e-15);
        }
    }

    #[test]
    fn step_range_is_one_based() {
        let s = DiffusionSchedule::linear(10, 1e-3, 0.1).unwrap();
        assert!(s.check_step(0).is_err());
        assert!(s.check_step(1).is_ok());
        assert!(s.check_step(10).is_ok());
        assert!(s.check_step(11).is_err());
    }

    proptest::proptest! {
        #[test]
        fn invariants_hold(steps in 1usize..400, start in 1e-5f64..0.05, extra in 0.0f64..0.4) {
            let end = (start + extra).min(0.99);
            let s = DiffusionSchedule::linear(steps, start, end).unwrap();
            for t in 1..=steps {
                proptest::prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                proptest::prop_assert_eq!(s.alpha(t), 1.0 - s.beta(t));
                let ab = s.alpha_bar(t);
                proptest::prop_assert!(ab > 0.0 && ab < 1.0);
                let unit = ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2);
                proptest::prop_assert!((unit - 1.0).abs() < 1e-15);
                if t > 1 {
                    proptest::prop_assert!(ab < s.alpha_bar(t - 1));
                }
            }
        }
    }
}
