//! Optimizer, training loop and checkpoints.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, make_windows, normalize, FrameSequence, Normalization};
use crate::diffusion::{draw_training_noise, training_loss_with};
use crate::model::NowcastModel;
use crate::nn::{ParamStore, Pass};
use crate::schedule::DiffusionSchedule;
use crate::{contract, Error, Result, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. The moment estimates are plain tensors so that
/// they can be written to and restored from a checkpoint.
pub struct Adam {
    cfg: AdamConfig,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        let vars = params.vars();
        let m = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            cfg,
            vars,
            m,
            v,
            t: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(self.t.min(i32::MAX as u64) as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients still reference the forward graph
            let g = &g.detach();
            let m = ((&self.m[i] * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.vars.len());
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.push((format!("adam_m/{name}"), self.m[i].clone()));
            out.push((format!("adam_v/{name}"), self.v[i].clone()));
        }
        out
    }

    fn load_state(&mut self, tensors: &HashMap<String, Tensor>, t: u64) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (prefix, slot) in [("adam_m", &mut self.m[i]), ("adam_v", &mut self.v[i])] {
                let key = format!("{prefix}/{name}");
                let src = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                if src.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("tensor `{key}` has the wrong shape")));
                }
                *slot = src.to_dtype(var.dtype())?;
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Normalized training windows held in memory.
pub struct Dataset {
    inputs: Vec<Array3<f32>>,
    targets: Vec<Array3<f32>>,
    height: usize,
    width: usize,
}

impl Dataset {
    pub fn from_sequences(
        seqs: &[FrameSequence],
        stride: usize,
        mode: Normalization,
    ) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut dims = None;
        for seq in seqs {
            let d = (seq.height(), seq.width());
            if *dims.get_or_insert(d) != d {
                return Err(Error::Data(format!(
                    "sequences mix grid sizes {:?} and {d:?}",
                    dims.unwrap()
                )));
            }
            for s in make_windows(seq, stride)? {
                inputs.push(normalize(s.inputs.view(), mode)?);
                targets.push(normalize(s.targets.view(), mode)?);
            }
        }
        if inputs.is_empty() {
            return Err(Error::Data("no 8-frame windows in the dataset".into()));
        }
        let (height, width) = dims.expect("nonempty");
        Ok(Self {
            inputs,
            targets,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `(inputs, targets)` tensors of shape `(B, 4, H, W)` for the given windows.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let stack = |items: &[Array3<f32>]| -> Result<Tensor> {
            let views: Vec<_> = indices.iter().map(|&i| items[i].view()).collect();
            let a = ndarray::stack(Axis(0), &views).map_err(|e| Error::Data(e.to_string()))?;
            let shape = a.shape().to_vec();
            let values: Vec<f32> = a.into_iter().collect();
            Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
        };
        Ok((stack(&self.inputs)?, stack(&self.targets)?))
    }
}

/// A model plus its optimizer state and step counter.
pub struct Trainer {
    pub model: NowcastModel,
    pub adam: Adam,
    pub schedule: DiffusionSchedule,
    pub step: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Trainer {
    pub fn new(
        model: NowcastModel,
        adam: AdamConfig,
        schedule: DiffusionSchedule,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let adam = Adam::new(model.params(), adam)?;
        Ok(Self {
            model,
            adam,
            schedule,
            step: 0,
            batch_size,
            seed,
        })
    }

    /// The random stream of step `step`: batch choice, diffusion steps and noise.
    /// Separate streams per step make a resumed run draw exactly what an
    /// uninterrupted one would.
    pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        rng
    }

    /// One optimizer update; returns the loss before the update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<f64> {
        let mut rng = Self::step_rng(self.seed, self.step + 1);
        let indices: Vec<usize> = (0..self.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let (frames, x0) = data.batch(&indices, self.model.dtype(), self.model.device())?;
        let (steps, eps) = draw_training_noise(&x0, &self.schedule, &mut rng)?;
        let loss = training_loss_with(
            &self.model,
            &x0,
            &frames,
            &steps,
            &eps,
            &self.schedule,
            &Pass::train(),
        )?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        contract!(value.is_finite(), "training loss diverged at step {}", self.step + 1);
        let grads = loss.backward()?;
        self.adam.step(&grads)?;
        self.step += 1;
        Ok(value)
    }
}

/// Contents of a checkpoint file.
pub struct Checkpoint {
    pub step: u64,
    pub config: String,
    pub tensors: HashMap<String, Tensor>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, trainer: &Trainer, config: &str) -> Result<()> {
    let path = path.as_ref();
    let mut named: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in trainer.model.params().snapshot() {
        named.push((format!("param/{name}"), t));
    }
    for (name, t) in trainer.model.buffers().snapshot() {
        named.push((format!("buffer/{name}"), t));
    }
    named.extend(trainer.adam.state());
    let named = named
        .into_iter()
        .map(|(k, t)| Ok((k, t.contiguous()?)))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let meta = HashMap::from([
        ("step".to_string(), trainer.step.to_string()),
        ("config".to_string(), config.to_string()),
    ]);
    let bytes = safetensors::serialize(named.iter().map(|(k, t)| (k.as_str(), t)), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = meta.metadata().clone().unwrap_or_default();
    let step = meta
        .get("step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("checkpoint has no step counter".into()))?;
    let config = meta
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no configuration".into()))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok(Checkpoint {
        step,
        config,
        tensors,
    })
}

fn strip(tensors: &HashMap<String, Tensor>, prefix: &str) -> HashMap<String, Tensor> {
    tensors
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
        .collect()
}

/// Loads parameters and batch-norm statistics into `model`.
pub fn restore_model(model: &NowcastModel, ckpt: &Checkpoint) -> Result<()> {
    model.params().load(&strip(&ckpt.tensors, "param/"))?;
    model.buffers().load(&strip(&ckpt.tensors, "buffer/"))
}

/// Loads the model, the optimizer moments and the step counter.
pub fn restore_trainer(trainer: &mut Trainer, ckpt: &Checkpoint) -> Result<()> {
    restore_model(&trainer.model, ckpt)?;
    trainer.adam.load_state(&ckpt.tensors, ckpt.step)?;
    trainer.step = ckpt.step;
    Ok(())
}

/// Rebuilds a model from a checkpoint's stored configuration.
pub fn model_from_checkpoint(ckpt: &Checkpoint, device: &Device) -> Result<(RunConfig, NowcastModel)> {
    let cfg = RunConfig::from_text(&ckpt.config)?;
    let model = NowcastModel::new(&cfg.model()?, cfg.seed, DType::F32, device)?;
    restore_model(&model, ckpt)?;
    Ok((cfg, model))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let paths = data::list_nrf(&cfg.data_dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no .nrf files in {}",
            cfg.data_dir.display()
        )));
    }
    let seqs = paths
        .iter()
        .map(data::load_nrf)
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::from_sequences(&seqs, cfg.window_stride, cfg.normalization)?;
    let (h, w) = data.dims();
    contract!(
        h == cfg.resolution && w == cfg.resolution,
        "data is {h}x{w} but the model resolution is {}",
        cfg.resolution
    );
    Ok(data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub losses: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Keeps the header and the rows up to `step` of an existing loss log.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = String::from("step,loss\n");
    for line in text.lines().skip(1) {
        let keep = line
            .split(',')
            .next()
            .and_then(|s| s.parse::<u64>().ok())
            .is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs `cfg.train_steps` updates in total, writing the loss log and periodic
/// checkpoints. With `resume`, training continues from `cfg.checkpoint`.
pub fn run_training(
    cfg: &RunConfig,
    resume: bool,
    progress: &mut dyn Write,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let model = NowcastModel::new(&cfg.model()?, cfg.seed, DType::F32, &Device::Cpu)?;
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    let mut trainer = Trainer::new(model, adam, cfg.schedule()?, cfg.batch_size, cfg.seed)?;
    let config_text = cfg.to_text();
    if resume {
        let ckpt = load_checkpoint(&cfg.checkpoint)?;
        let stored = RunConfig::from_text(&ckpt.config)?;
        contract!(
            stored.model()? == cfg.model()?,
            "checkpoint {} was trained with a different model layout",
            cfg.checkpoint.display()
        );
        restore_trainer(&mut trainer, &ckpt)?;
        truncate_log(&cfg.loss_log, trainer.step)?;
    } else {
        std::fs::write(&cfg.loss_log, "step,loss\n").map_err(|e| Error::io(&cfg.loss_log, e))?;
    }
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(&cfg.loss_log)
        .map_err(|e| Error::io(&cfg.loss_log, e))?;
    let first_step = trainer.step + 1;
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.step < cfg.train_steps {
        let loss = trainer.train_step(&data)?;
        let step = trainer.step;
        writeln!(log, "{step},{loss}").map_err(|e| Error::io(&cfg.loss_log, e))?;
        losses.push((step, loss));
        if step % cfg.checkpoint_every == 0 || step == cfg.train_steps {
            save_checkpoint(&cfg.checkpoint, &trainer, &config_text)?;
            checkpoints.push(cfg.checkpoint.clone());
            let _ = writeln!(progress, "step {step}: loss {loss:.6}, checkpoint written");
        }
    }
    Ok(TrainSummary {
        first_step,
        last_step: trainer.step,
        losses,
        checkpoints,
    })
}
