//! The operations behind each command-line subcommand.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, denormalize, normalize, synth_advection, FrameSequence, SynthConfig};
use crate::diffusion::sample;
use crate::gan_losses::{weighted_regularizer, WeightMode};
use crate::metrics::{evaluate_report, format_value, ReportOptions};
use crate::train::{self, load_checkpoint, model_from_checkpoint, TrainSummary};
use crate::{contract, Error, Result, RunConfig, INPUT_FRAMES};

/// Writes `cfg.synth_count` synthetic sequences into `out_dir`. Sequence `i`
/// draws from stream `i` of the run seed, so files do not depend on the count.
pub fn synth(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scfg = SynthConfig {
        frames: cfg.synth_frames,
        height: cfg.resolution,
        width: cfg.resolution,
        ..SynthConfig::default()
    };
    let mut paths = Vec::with_capacity(cfg.synth_count);
    for i in 0..cfg.synth_count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let seq = synth_advection(&scfg, &mut rng)?.sequence;
        let path = out_dir.join(format!("seq_{i:04}.nrf"));
        data::save_nrf(&seq, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn train(cfg: &RunConfig, resume: bool, progress: &mut dyn Write) -> Result<TrainSummary> {
    train::run_training(cfg, resume, progress)
}

/// Overrides a prediction may request; each must agree with the checkpoint.
#[derive(Debug, Clone, Copy, Default)]
pub struct PredictOptions {
    pub seed: u64,
    pub resolution: Option<usize>,
    pub diffusion_steps: Option<usize>,
}

/// Forecasts the four frames following the last four frames of `input`.
pub fn predict(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    opts: &PredictOptions,
) -> Result<FrameSequence> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (cfg, model) = model_from_checkpoint(&ckpt, &Device::Cpu)?;
    if let Some(r) = opts.resolution {
        contract!(
            r == cfg.resolution,
            "requested resolution {r} but the checkpoint was trained at {}",
            cfg.resolution
        );
    }
    if let Some(t) = opts.diffusion_steps {
        contract!(
            t == cfg.diffusion_steps,
            "requested {t} diffusion steps but the checkpoint was trained with {}",
            cfg.diffusion_steps
        );
    }
    let seq = data::load_nrf(input)?;
    contract!(
        seq.len() >= INPUT_FRAMES,
        "input has {} frames, need at least {INPUT_FRAMES}",
        seq.len()
    );
    contract!(
        seq.height() == cfg.resolution && seq.width() == cfg.resolution,
        "input is {}x{} but the checkpoint resolution is {}",
        seq.height(),
        seq.width(),
        cfg.resolution
    );
    let past = seq.frames().slice(s![seq.len() - INPUT_FRAMES.., .., ..]);
    let past = normalize(past, cfg.normalization)?;
    let shape = [1, INPUT_FRAMES, cfg.resolution, cfg.resolution];
    let frames = Tensor::from_vec(past.into_iter().collect(), &shape, &Device::Cpu)?
        .to_dtype(model.dtype())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let out = sample(&model, &frames, &cfg.schedule()?, &mut rng)?;
    let values: Vec<f32> = out.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let grid = Array3::from_shape_vec((shape[1], shape[2], shape[3]), values)
        .map_err(|e| Error::Data(e.to_string()))?;
    let forecast = FrameSequence::new(
        denormalize(grid.view(), cfg.normalization),
        seq.cadence_minutes(),
    )?;
    data::save_nrf(&forecast, output)?;
    Ok(forecast)
}

/// Skill report CSV for a forecast file against an observation file, with a
/// closing row for the weighted regularizer of the forecast.
pub fn evaluate(
    pred: &Path,
    obs: &Path,
    opts: &ReportOptions,
    weight_mode: WeightMode,
) -> Result<String> {
    let p = data::load_nrf(pred)?.into_frames().mapv(f64::from);
    let o = data::load_nrf(obs)?.into_frames().mapv(f64::from);
    contract!(
        p.dim() == o.dim(),
        "forecast {:?} and observation {:?} differ in shape",
        p.dim(),
        o.dim()
    );
    evaluate_arrays(&p, &o, opts, weight_mode)
}

pub fn evaluate_arrays(
    pred: &Array3<f64>,
    obs: &Array3<f64>,
    opts: &ReportOptions,
    weight_mode: WeightMode,
) -> Result<String> {
    let report = evaluate_report(pred.view(), obs.view(), opts)?;
    let reg = weighted_regularizer(pred.view(), obs.view(), weight_mode)?;
    let mut csv = report.to_csv();
    csv.push_str(&format!(
        "weighted_regularizer,{weight_mode},{}\n",
        format_value(Some(reg))
    ));
    Ok(csv)
}

pub fn render(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let seq = data::load_nrf(input)?;
    crate::render::render_sequence(&seq, out_dir)
}
