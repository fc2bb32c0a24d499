//! Helpers shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raindiff::diffusion::{draw_training_noise, training_loss_with};
use raindiff::metrics::ConfusionCounts;
use raindiff::nn::Pass;
use raindiff::{DenoiserConfig, DiffusionSchedule, ModelConfig, NowcastModel, TauConfig};

/// Two-level model on 16×16 grids, small enough for finite differences.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        denoiser: DenoiserConfig {
            resolution: 16,
            levels: 2,
            base_channels: 4,
            channel_mults: vec![1, 2],
            attention_levels: vec![2],
            input_channels: 4,
            embed_dim: 8,
        },
        tau: TauConfig::default(),
    }
}

pub fn randn(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Tensor {
    raindiff::diffusion::standard_normal(shape, dtype, &Device::Cpu, rng).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub tensors: usize,
    pub max_rel: f64,
    pub worst: String,
    /// Entries above 1e-4 relative error.
    pub failures: Vec<String>,
}

/// Compares autograd against central differences with step `h` on at least
/// `min_params` parameter entries, covering every parameter tensor.
///
/// Steps and noise are drawn once, so the loss is a fixed function of the
/// parameters. The finite-difference passes replay the ReLU and argmax
/// selections recorded by the autograd pass.
pub fn gradient_check(
    cfg: &ModelConfig,
    train: bool,
    batch: usize,
    seed: u64,
    min_params: usize,
    h: f64,
) -> GradCheck {
    let model = NowcastModel::new(cfg, seed, DType::F64, &Device::Cpu).unwrap();
    let sched = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = randn(&[batch, 4, 16, 16], DType::F64, &mut rng);
    let frames = randn(&[batch, 4, 16, 16], DType::F64, &mut rng);
    let (steps, eps) = draw_training_noise(&x0, &sched, &mut rng).unwrap();

    let recording = Pass::recording(train);
    let loss = training_loss_with(&model, &x0, &frames, &steps, &eps, &sched, &recording).unwrap();
    let grads = loss.backward().unwrap();
    let eval = |pass: &Pass| {
        let l = training_loss_with(&model, &x0, &frames, &steps, &eps, &sched, pass).unwrap();
        scalar(&l)
    };

    let vars = model.params().vars();
    let total: usize = vars.iter().map(|(_, v)| v.elem_count()).sum();
    let mut picks: Vec<(usize, usize)> = vars
        .iter()
        .enumerate()
        .map(|(i, (_, v))| (i, rng.random_range(0..v.elem_count())))
        .collect();
    let mut pool: Vec<(usize, usize)> = vars
        .iter()
        .enumerate()
        .flat_map(|(i, (_, v))| (0..v.elem_count()).map(move |j| (i, j)))
        .filter(|p| !picks.contains(p))
        .collect();
    pool.shuffle(&mut rng);
    let extra = min_params.saturating_sub(picks.len()).min(total - picks.len());
    picks.extend(pool.into_iter().take(extra));

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut failures = Vec::new();
    for &(i, j) in &picks {
        let (name, var) = &vars[i];
        let original = var.as_tensor().copy().unwrap();
        let flat: Vec<f64> = original.flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; flat.len()],
        };
        let shifted = |delta: f64| {
            let mut v = flat.clone();
            v[j] += delta;
            var.set(&Tensor::from_vec(v, original.shape(), &Device::Cpu).unwrap())
                .unwrap();
            eval(&Pass::replay_of(&recording).unwrap())
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        var.set(&original).unwrap();
        let a = analytic[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        if rel >= 1e-4 {
            failures.push(format!("{name}[{j}]: {a:.6e} vs {numeric:.6e}"));
        }
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{name}[{j}]: autograd {a:.6e}, numeric {numeric:.6e}");
        }
    }
    GradCheck {
        checked: picks.len(),
        tensors: vars.len(),
        max_rel,
        worst,
        failures,
    }
}

/// Random rain field: mostly dry with a heavy tail, in `[0, 128]`.
pub fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| {
        if rng.random_bool(0.4) {
            0.0
        } else {
            (rng.random::<f64>().powi(3) * 128.0).min(128.0)
        }
    })
}

pub fn loop_confusion(pred: ArrayView2<'_, bool>, obs: ArrayView2<'_, bool>) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for i in 0..pred.nrows() {
        for j in 0..pred.ncols() {
            let (p, o) = (pred[[i, j]], obs[[i, j]]);
            if p && o {
                c.tp += 1;
            } else if p {
                c.fp += 1;
            } else if o {
                c.fn_ += 1;
            } else {
                c.tn += 1;
            }
        }
    }
    c
}

pub fn loop_csi(c: &ConfusionCounts) -> Option<f64> {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        None
    } else {
        Some(c.tp as f64 / den as f64)
    }
}

/// Heidke skill score; `verbatim` selects the (TP+TN) first factor.
pub fn loop_hss(c: &ConfusionCounts, verbatim: bool) -> Option<f64> {
    let (a, b, cc, d) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let first = if verbatim { a + d } else { a + cc };
    let den = first * (cc + d) + (a + b) * (b + d);
    let num = a * d - cc * b;
    if den == 0.0 {
        None
    } else if verbatim {
        Some(num / den)
    } else {
        Some(2.0 * num / den)
    }
}

/// Window event fraction by direct counting; windows are clipped at the edge.
pub fn loop_fractions(mask: ArrayView2<'_, bool>, n: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let r = (n / 2) as isize;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (mut events, mut cells) = (0u64, 0u64);
        for di in -r..=r {
            for dj in -r..=r {
                let (y, x) = (i as isize + di, j as isize + dj);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    cells += 1;
                    events += mask[[y as usize, x as usize]] as u64;
                }
            }
        }
        events as f64 / cells as f64
    })
}

pub fn loop_fss(pred: ArrayView2<'_, bool>, obs: ArrayView2<'_, bool>, n: usize) -> Option<f64> {
    let pf = loop_fractions(pred, n);
    let po = loop_fractions(obs, n);
    let (mut diff, mut sp, mut so) = (0.0, 0.0, 0.0);
    for i in 0..pf.nrows() {
        for j in 0..pf.ncols() {
            let (f, o) = (pf[[i, j]], po[[i, j]]);
            diff += (f - o) * (f - o);
            sp += f * f;
            so += o * o;
        }
    }
    let cells = pf.len() as f64;
    let reference = sp / cells + so / cells;
    if reference > 0.0 {
        Some(1.0 - (diff / cells) / reference)
    } else {
        None
    }
}

pub fn loop_mse(pred: ArrayView2<'_, f64>, obs: ArrayView2<'_, f64>) -> f64 {
    let mut sum = 0.0;
    for i in 0..pred.nrows() {
        for j in 0..pred.ncols() {
            let d = pred[[i, j]] - obs[[i, j]];
            sum += d * d;
        }
    }
    sum / pred.len() as f64
}

#[derive(Debug, Clone, Copy)]
pub struct Moments {
    pub t: usize,
    /// Pooled mean residual in units of its standard error.
    pub mean_z: f64,
    /// Pooled variance relative to 1 − ᾱ_t, minus one.
    pub var_rel: f64,
}

/// Empirical moments of `draws` forward corruptions of a fixed 8×8 `x0`,
/// pooled over the 64 pixels.
pub fn q_sample_moments(sched: &DiffusionSchedule, t: usize, draws: usize, seed: u64) -> Moments {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::from_vec(
        (0..64).map(|i| ((i as f64) * 0.37).sin()).collect::<Vec<f64>>(),
        (8, 8),
        &Device::Cpu,
    )
    .unwrap();
    let x0v: Vec<f64> = x0.flatten_all().unwrap().to_vec1().unwrap();
    let (mut sum, mut sq) = (vec![0.0; 64], vec![0.0; 64]);
    for _ in 0..draws {
        let eps = randn(&[8, 8], DType::F64, &mut rng);
        let x = raindiff::diffusion::q_sample(&x0, t, &eps, sched).unwrap().x;
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        for (k, v) in xv.iter().enumerate() {
            sum[k] += v;
            sq[k] += v * v;
        }
    }
    let n = draws as f64;
    let ab = sched.alpha_bar(t);
    let (mut resid, mut var) = (0.0, 0.0);
    for k in 0..64 {
        let m = sum[k] / n;
        resid += m - ab.sqrt() * x0v[k];
        var += (sq[k] - n * m * m) / (n - 1.0);
    }
    let se = ((1.0 - ab) / (n * 64.0)).sqrt();
    Moments {
        t,
        mean_z: (resid / 64.0) / se,
        var_rel: (var / 64.0) / (1.0 - ab) - 1.0,
    }
}
