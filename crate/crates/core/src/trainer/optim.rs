//! Adaptive optimizers with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::config::OptimizerKind;
use crate::error::{CmidError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub eps: f64,
}

impl OptimizerSettings {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self {
            kind,
            weight_decay,
            eps: 1e-8,
        }
    }
}

const ADAN_BETAS: (f64, f64, f64) = (0.98, 0.92, 0.99);
const ADAMW_BETAS: (f64, f64) = (0.9, 0.999);

/// Per-parameter moment buffers keyed by parameter name. Adan keeps
/// `m, v, n, prev_grad`; AdamW keeps `m, v`.
pub struct Optimizer {
    settings: OptimizerSettings,
    vars: Vec<(String, Var)>,
    state: BTreeMap<String, Vec<Tensor>>,
    steps: u64,
}

/// Only matrices and convolution kernels are decayed; biases, norm scales,
/// the mask token and other vectors are not.
fn decays(var: &Var) -> bool {
    var.rank() >= 2
}

impl Optimizer {
    pub fn new(vars: Vec<(String, Var)>, settings: OptimizerSettings) -> Self {
        Self {
            settings,
            vars,
            state: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn settings(&self) -> &OptimizerSettings {
        &self.settings
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn slots(&self) -> &'static [&'static str] {
        match self.settings.kind {
            OptimizerKind::Adan => &["m", "v", "n", "prev_grad"],
            OptimizerKind::AdamW => &["m", "v"],
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let wd = self.settings.weight_decay;
        let eps = self.settings.eps;
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let p = var.as_tensor().detach();
            let slots = self.state.entry(name.clone()).or_insert_with(|| Vec::new());
            let wd = if decays(var) { wd } else { 0.0 };
            let updated = match self.settings.kind {
                OptimizerKind::Adan => {
                    let (b1, b2, b3) = ADAN_BETAS;
                    if slots.is_empty() {
                        let z = g.zeros_like()?;
                        *slots = vec![z.clone(), z.clone(), z, g.clone()];
                    }
                    let diff = (&g - &slots[3])?;
                    let m = ((&slots[0] * b1)? + (&g * (1.0 - b1))?)?;
                    let v = ((&slots[1] * b2)? + (&diff * (1.0 - b2))?)?;
                    let u = (&g + (&diff * b2)?)?;
                    let n = ((&slots[2] * b3)? + (u.sqr()? * (1.0 - b3))?)?;
                    let bc1 = 1.0 - b1.powi(t);
                    let bc2 = 1.0 - b2.powi(t);
                    let bc3 = (1.0 - b3.powi(t)).sqrt();
                    let denom = ((n.sqrt()? / bc3)? + eps)?;
                    let direction = ((&m / bc1)? + (&v * (b2 / bc2))?)?;
                    let stepped = (&p - (direction / denom)? * lr)?;
                    let out = (stepped / (1.0 + lr * wd))?;
                    *slots = vec![m, v, n, g];
                    out
                }
                OptimizerKind::AdamW => {
                    let (b1, b2) = ADAMW_BETAS;
                    if slots.is_empty() {
                        let z = g.zeros_like()?;
                        *slots = vec![z.clone(), z];
                    }
                    let m = ((&slots[0] * b1)? + (&g * (1.0 - b1))?)?;
                    let v = ((&slots[1] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
                    let mh = (&m / (1.0 - b1.powi(t)))?;
                    let vh = (&v / (1.0 - b2.powi(t)))?;
                    let decayed = (&p * (1.0 - lr * wd))?;
                    let out = (decayed - ((mh / (vh.sqrt()? + eps)?)? * lr)?)?;
                    *slots = vec![m, v];
                    out
                }
            };
            var.set(&updated)?;
        }
        Ok(())
    }

    /// Moment buffers as `optim.<slot>.<param>` tensors plus the step count.
    pub fn export(&self) -> (BTreeMap<String, Tensor>, u64) {
        let mut out = BTreeMap::new();
        for (name, slots) in &self.state {
            for (slot, t) in self.slots().iter().zip(slots) {
                out.insert(format!("{slot}.{name}"), t.clone());
            }
        }
        (out, self.steps)
    }

    pub fn import(&mut self, tensors: &BTreeMap<String, Tensor>, steps: u64) -> Result<()> {
        let mut state = BTreeMap::new();
        for (name, var) in &self.vars {
            let found: Vec<Option<&Tensor>> = self
                .slots()
                .iter()
                .map(|slot| tensors.get(&format!("{slot}.{name}")))
                .collect();
            if found.iter().all(|t| t.is_none()) {
                continue;
            }
            let mut slots = Vec::new();
            for t in found {
                let t = t.ok_or_else(|| {
                    CmidError::Checkpoint(format!("incomplete optimizer state for {name}"))
                })?;
                if t.dims() != var.dims() {
                    return Err(CmidError::Checkpoint(format!(
                        "optimizer state shape mismatch for {name}"
                    )));
                }
                slots.push(t.clone());
            }
            state.insert(name.clone(), slots);
        }
        self.state = state;
        self.steps = steps;
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[(String, Var)], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (_, var) in vars {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g
                .sqr()?
                .sum_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, var) in vars {
            if let Some(g) = grads.remove(var.as_tensor()) {
                grads.insert(var.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}
