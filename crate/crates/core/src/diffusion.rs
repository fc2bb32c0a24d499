//! Forward corruption, the noise-prediction training objective and the
//! ancestral DDPM sampler.

use candle_core::{DType, Device, Shape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::Pass;
use crate::schedule::DiffusionSchedule;
use crate::{contract, Result, TARGET_FRAMES};

/// A noise predictor ε_θ(x_t, t, c).
///
/// `condition` turns the past frames into whatever the predictor fuses into
/// its features; it runs once per batch (and once per sampled forecast, not
/// once per reverse step).
pub trait NoisePredictor {
    type Condition;

    fn condition(&self, frames: &Tensor, pass: &Pass) -> Result<Self::Condition>;

    /// `steps[i]` is the 1-based diffusion step of batch element `i`.
    fn predict_noise(
        &self,
        x_t: &Tensor,
        steps: &[usize],
        condition: &Self::Condition,
    ) -> Result<Tensor>;
}

/// A corrupted sample together with its 1-based step.
#[derive(Debug, Clone)]
pub struct NoisyState {
    pub x: Tensor,
    pub t: usize,
}

/// Standard-normal tensor drawn element by element from `rng`.
pub fn standard_normal<R: Rng + ?Sized>(
    shape: impl Into<Shape>,
    dtype: DType,
    device: &Device,
    rng: &mut R,
) -> Result<Tensor> {
    let shape = shape.into();
    let values: Vec<f64> = (0..shape.elem_count())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Per-sample coefficient column of shape `(B, 1, 1, 1)`.
fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut dims = vec![values.len()];
    dims.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(Tensor::from_vec(values.to_vec(), dims, like.device())?.to_dtype(like.dtype())?)
}

/// √ᾱ_t·x0 + √(1−ᾱ_t)·ε at a single step `t`.
pub fn q_sample(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<NoisyState> {
    sched.check_step(t)?;
    contract!(
        x0.dims() == eps.dims(),
        "x0 {:?} and noise {:?} differ in shape",
        x0.dims(),
        eps.dims()
    );
    let ab = sched.alpha_bar(t);
    let x = ((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?;
    Ok(NoisyState { x, t })
}

/// Batched forward corruption where batch element `i` is taken to step `steps[i]`.
pub fn q_sample_batch(
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    contract!(
        x0.dims() == eps.dims(),
        "x0 {:?} and noise {:?} differ in shape",
        x0.dims(),
        eps.dims()
    );
    contract!(
        x0.rank() >= 1 && x0.dims()[0] == steps.len(),
        "{} steps for a batch of {}",
        steps.len(),
        x0.dims().first().copied().unwrap_or(0)
    );
    for &t in steps {
        sched.check_step(t)?;
    }
    let signal: Vec<f64> = steps.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect();
    let noise: Vec<f64> = steps
        .iter()
        .map(|&t| (1.0 - sched.alpha_bar(t)).sqrt())
        .collect();
    let a = per_sample(&signal, x0)?;
    let b = per_sample(&noise, x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// The denoising objective with explicitly supplied step and noise draws:
/// mean over batch and elements of (ε − ε_θ(q_sample(x0, t, ε), t, c))².
pub fn training_loss_with<P: NoisePredictor>(
    model: &P,
    x0: &Tensor,
    frames: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    sched: &DiffusionSchedule,
    pass: &Pass,
) -> Result<Tensor> {
    contract!(!steps.is_empty(), "empty batch");
    let x_t = q_sample_batch(x0, steps, eps, sched)?;
    let condition = model.condition(frames, pass)?;
    let eps_hat = model.predict_noise(&x_t, steps, &condition)?;
    contract!(
        eps_hat.dims() == eps.dims(),
        "predicted noise {:?} does not match {:?}",
        eps_hat.dims(),
        eps.dims()
    );
    Ok((eps - eps_hat)?.sqr()?.mean_all()?)
}

/// Draws of the training objective: a uniform step in `1..=T` per sample and
/// standard-normal noise per element.
pub fn draw_training_noise<R: Rng + ?Sized>(
    x0: &Tensor,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(Vec<usize>, Tensor)> {
    let batch = x0.dims()[0];
    let steps: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(1..=sched.steps()))
        .collect();
    let eps = standard_normal(x0.shape(), x0.dtype(), x0.device(), rng)?;
    Ok((steps, eps))
}

/// One evaluation of the training objective with fresh draws from `rng`.
/// The result is a scalar tensor that can be differentiated w.r.t. the
/// predictor's parameters.
pub fn training_loss<P: NoisePredictor, R: Rng + ?Sized>(
    model: &P,
    x0: &Tensor,
    frames: &Tensor,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    contract!(x0.rank() == 4 && x0.dims()[0] > 0, "empty batch");
    let (steps, eps) = draw_training_noise(x0, sched, rng)?;
    training_loss_with(model, x0, frames, &steps, &eps, sched, &Pass::train())
}

/// One reverse step:
/// x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·z.
///
/// `z = None` stands for zero noise; at `t = 1` any nonzero `z` is rejected.
pub fn ddpm_step(
    state: &NoisyState,
    eps_hat: &Tensor,
    z: Option<&Tensor>,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let t = state.t;
    sched.check_step(t)?;
    contract!(
        state.x.dims() == eps_hat.dims(),
        "state {:?} and predicted noise {:?} differ in shape",
        state.x.dims(),
        eps_hat.dims()
    );
    let alpha = sched.alpha(t);
    let coef = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
    let mean = ((&state.x - (eps_hat * coef)?)? * (1.0 / alpha.sqrt()))?;
    match z {
        None => Ok(mean),
        Some(z) => {
            contract!(
                z.dims() == state.x.dims(),
                "noise {:?} does not match state {:?}",
                z.dims(),
                state.x.dims()
            );
            if t == 1 {
                let peak = z
                    .abs()?
                    .flatten_all()?
                    .max(0)?
                    .to_dtype(DType::F64)?
                    .to_scalar::<f64>()?;
                contract!(peak == 0.0, "the final reverse step takes no noise");
                return Ok(mean);
            }
            Ok((mean + (z * sched.sigma(t))?)?)
        }
    }
}

/// Ancestral sampling of `TARGET_FRAMES` future frames for every element of
/// the `(B, C, H, W)` `frames` batch. Starts from standard-normal noise and
/// performs exactly `sched.steps()` predictor evaluations.
pub fn sample<P: NoisePredictor, R: Rng + ?Sized>(
    model: &P,
    frames: &Tensor,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let (b, _, h, w) = frames.dims4()?;
    let condition = model.condition(frames, &Pass::eval())?;
    let shape = (b, TARGET_FRAMES, h, w);
    let mut x = standard_normal(shape, frames.dtype(), frames.device(), rng)?;
    for t in (1..=sched.steps()).rev() {
        let steps = vec![t; b];
        let eps_hat = model.predict_noise(&x, &steps, &condition)?.detach();
        let z = if t > 1 {
            Some(standard_normal(shape, frames.dtype(), frames.device(), rng)?)
        } else {
            None
        };
        x = ddpm_step(&NoisyState { x, t }, &eps_hat, z.as_ref(), sched)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        t.to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn q_sample_zero_noise_and_zero_signal() {
        let sched = DiffusionSchedule::linear(10, 0.01, 0.2).unwrap();
        let x0 = Tensor::new(&[0.5f64, -1.0, 2.0], &Device::Cpu).unwrap();
        let zero = x0.zeros_like().unwrap();
        let s = q_sample(&x0, 4, &zero, &sched).unwrap();
        let expect: Vec<f64> = [0.5, -1.0, 2.0]
            .iter()
            .map(|v| v * sched.alpha_bar(4).sqrt())
            .collect();
        assert_eq!(s.x.to_vec1::<f64>().unwrap(), expect);
        assert_eq!(s.t, 4);
        let s = q_sample(&zero, 7, &x0, &sched).unwrap();
        let expect: Vec<f64> = [0.5, -1.0, 2.0]
            .iter()
            .map(|v| v * (1.0 - sched.alpha_bar(7)).sqrt())
            .collect();
        assert_eq!(s.x.to_vec1::<f64>().unwrap(), expect);
    }

    #[test]
    fn q_sample_scalar_case() {
        // ᾱ = 0.25 with a single step of β = 0.75
        let sched = DiffusionSchedule::linear(1, 0.75, 0.75).unwrap();
        let s = q_sample(&scalar(1.0), 1, &scalar(1.0), &sched).unwrap();
        assert!((value(&s.x) - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((value(&s.x) - 1.3660).abs() < 1e-4);
    }

    #[test]
    fn q_sample_rejects_mismatched_shapes_and_steps() {
        let sched = DiffusionSchedule::linear(5, 0.01, 0.1).unwrap();
        let a = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(q_sample(&a, 1, &b, &sched), Err(Error::Contract(_))));
        assert!(q_sample(&a, 0, &a, &sched).is_err());
        assert!(q_sample(&a, 6, &a, &sched).is_err());
    }

    #[test]
    fn batched_q_sample_matches_single_step_version() {
        let sched = DiffusionSchedule::linear(20, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = standard_normal((3, 2, 2, 2), DType::F64, &Device::Cpu, &mut rng).unwrap();
        let eps = standard_normal((3, 2, 2, 2), DType::F64, &Device::Cpu, &mut rng).unwrap();
        let steps = [1, 10, 20];
        let batched = q_sample_batch(&x0, &steps, &eps, &sched).unwrap();
        for (i, &t) in steps.iter().enumerate() {
            let single = q_sample(&x0.get(i).unwrap(), t, &eps.get(i).unwrap(), &sched).unwrap();
            let a: Vec<f64> = batched.get(i).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f64> = single.x.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ddpm_step_collapses_without_noise() {
        let sched = DiffusionSchedule::linear(10, 0.01, 0.2).unwrap();
        let x = scalar(0.8);
        let out = ddpm_step(&NoisyState { x, t: 6 }, &scalar(0.0), None, &sched).unwrap();
        assert!((value(&out) - 0.8 / sched.alpha(6).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ddpm_step_scalar_case() {
        // α_t = 0.99 and ᾱ_t = 0.5 built from β = (1 − 0.5/0.99, 0.01).
        let first = 1.0 - 0.5 / 0.99;
        let sched =
            DiffusionSchedule::from_betas(vec![first, 0.01], crate::SigmaMode::Beta).unwrap();
        assert!((sched.alpha_bar(2) - 0.5).abs() < 1e-15);
        let out = ddpm_step(&NoisyState { x: scalar(1.0), t: 2 }, &scalar(1.0), None, &sched)
            .unwrap();
        let expect = (1.0 - 0.01 / 0.5f64.sqrt()) / 0.99f64.sqrt();
        assert!((value(&out) - expect).abs() < 1e-12);
        assert!((value(&out) - 0.9908).abs() < 1e-4);
    }

    #[test]
    fn ddpm_step_adds_scaled_noise_and_forbids_it_at_the_end() {
        let sched = DiffusionSchedule::linear(10, 0.01, 0.2).unwrap();
        let mean = ddpm_step(&NoisyState { x: scalar(0.3), t: 5 }, &scalar(0.1), None, &sched)
            .unwrap();
        let noisy = ddpm_step(
            &NoisyState { x: scalar(0.3), t: 5 },
            &scalar(0.1),
            Some(&scalar(2.0)),
            &sched,
        )
        .unwrap();
        assert!((value(&noisy) - value(&mean) - 2.0 * sched.sigma(5)).abs() < 1e-15);

        let last = NoisyState { x: scalar(0.3), t: 1 };
        assert!(matches!(
            ddpm_step(&last, &scalar(0.1), Some(&scalar(0.5)), &sched),
            Err(Error::Contract(_))
        ));
        let a = ddpm_step(&last, &scalar(0.1), Some(&scalar(0.0)), &sched).unwrap();
        let b = ddpm_step(&last, &scalar(0.1), None, &sched).unwrap();
        assert_eq!(value(&a), value(&b));
    }

    /// Predicts a fixed tensor plus a constant offset, counting calls.
    struct Fixed {
        eps: Tensor,
        offset: f64,
        calls: Cell<usize>,
    }

    impl NoisePredictor for Fixed {
        type Condition = ();

        fn condition(&self, _frames: &Tensor, _pass: &Pass) -> Result<()> {
            Ok(())
        }

        fn predict_noise(&self, x_t: &Tensor, _steps: &[usize], _c: &()) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            if self.eps.dims() == x_t.dims() {
                Ok((&self.eps + self.offset)?)
            } else {
                Ok((x_t.zeros_like()? + self.offset)?)
            }
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss_and_offset_costs_its_square() {
        let sched = DiffusionSchedule::linear(50, 1e-3, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = standard_normal((2, 4, 4, 4), DType::F64, &Device::Cpu, &mut rng).unwrap();
        let (steps, eps) = draw_training_noise(&x0, &sched, &mut rng).unwrap();
        assert!(steps.iter().all(|t| (1..=50).contains(t)));
        let oracle = Fixed {
            eps: eps.clone(),
            offset: 0.0,
            calls: Cell::new(0),
        };
        let loss = training_loss_with(&oracle, &x0, &x0, &steps, &eps, &sched, &Pass::train())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(loss, 0.0);

        let shifted = Fixed {
            eps: eps.clone(),
            offset: 0.7,
            calls: Cell::new(0),
        };
        let loss = training_loss_with(&shifted, &x0, &x0, &steps, &eps, &sched, &Pass::train())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((loss - 0.49).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn sampler_calls_predictor_once_per_step_and_is_seeded() {
        let sched = DiffusionSchedule::linear(100, 1e-3, 0.1).unwrap();
        let model = Fixed {
            eps: Tensor::zeros(1, DType::F64, &Device::Cpu).unwrap(),
            offset: 0.01,
            calls: Cell::new(0),
        };
        let frames = Tensor::zeros((2, 4, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let a = sample(&model, &frames, &sched, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(model.calls.get(), 100);
        assert_eq!(a.dims(), &[2, TARGET_FRAMES, 8, 8]);
        let b = sample(&model, &frames, &sched, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let av: Vec<f64> = a.flatten_all().unwrap().to_vec1().unwrap();
        let bv: Vec<f64> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(av, bv);
        let c = sample(&model, &frames, &sched, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let cv: Vec<f64> = c.flatten_all().unwrap().to_vec1().unwrap();
        assert_ne!(av, cv);
    }
}
