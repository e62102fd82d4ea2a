use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CmidError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// `U(-b, b)` with `b = 1 / sqrt(fan_in)`.
    FanInUniform { fan_in: usize },
    Normal { std: f64 },
}

/// Named trainable tensors, ordered by name, initialized from a seeded
/// generator so that a seed fixes every parameter bit.
pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn sample(&self, n: usize, init: Init) -> Vec<f32> {
        let mut rng = self.rng.borrow_mut();
        match init {
            Init::Const(v) => vec![v as f32; n],
            Init::FanInUniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-b..b) as f32).collect()
            }
            Init::Normal { std } => (0..n)
                .map(|_| {
                    // Box-Muller.
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    (std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
                        as f32
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Snapshot of every parameter (copies, detached from the variables).
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites parameters in place. Every stored name must be present
    /// with a matching shape.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars.borrow().iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| CmidError::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(CmidError::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }
}

#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: &str) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    /// Creates a parameter; creating the same name twice is a bug.
    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.pp(name).prefix;
        let n = shape.iter().product();
        let data = self.store.sample(n, init);
        let t = Tensor::from_vec(data, shape, &self.store.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let previous = self.store.vars.borrow_mut().insert(full.clone(), var);
        assert!(previous.is_none(), "parameter {full} created twice");
        Ok(out)
    }
}
