use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    /// The default fan-in scaled uniform init used for conv and linear layers.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

/// Named, seeded collection of trainable variables (or non-trainable buffers).
pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        Ok(self.create_var(name, shape, init)?.as_tensor().clone())
    }

    pub fn create_var(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        let shape = shape.into();
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Uniform(bound) => {
                let mut rng = self.rng.lock().expect("param rng poisoned");
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let mut vars = self.vars.lock().expect("param map poisoned");
        if vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let vars = self.vars.lock().expect("param map poisoned");
        vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("param map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_elements(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().copy().expect("tensor copy")))
            .collect()
    }

    /// Overwrites every variable from `values`; every name must be present with
    /// a matching shape.
    pub fn load(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars() {
            let src = values
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// A name prefix over a pair of stores: trainable parameters and buffers.
#[derive(Clone, Copy)]
pub struct Scope<'a> {
    params: &'a ParamStore,
    buffers: &'a ParamStore,
    prefix: &'a str,
}

impl<'a> Scope<'a> {
    pub fn new(params: &'a ParamStore, buffers: &'a ParamStore) -> Self {
        Self {
            params,
            buffers,
            prefix: "",
        }
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with a nested prefix.
    pub fn with<T>(&self, name: impl AsRef<str>, f: impl FnOnce(Scope<'_>) -> T) -> T {
        let prefix = self.full(name.as_ref());
        f(Scope {
            params: self.params,
            buffers: self.buffers,
            prefix: &prefix,
        })
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        self.params.create(&self.full(name), shape, init)
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.buffers.create_var(&self.full(name), shape, init)
    }
}
