use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name so
/// the state can be checkpointed and restored into a fresh model.
///
/// Decay applies to tensors of rank two or more, so biases, norm parameters
/// and the temperature are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// What one call to [`AdamW::step`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Number of parameters that received a gradient.
    pub updated: usize,
}

impl AdamW {
    pub fn new(hyper: AdamWHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every var in `params` that has a gradient in `grads`. With
    /// `clip`, gradients are rescaled so their global norm is at most `clip`.
    pub fn step(
        &mut self,
        params: &[(String, Var)],
        grads: &GradStore,
        lr: f64,
        clip: Option<f64>,
    ) -> Result<StepInfo> {
        let live: Vec<(&String, &Var, &Tensor)> = params
            .iter()
            .filter_map(|(n, v)| grads.get(v.as_tensor()).map(|g| (n, v, g)))
            .collect();
        let mut sq = 0.0;
        for (name, _, g) in &live {
            let s = g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            sq += s;
        }
        let grad_norm = sq.sqrt();
        let scale = match clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for (name, var, g) in &live {
            let g = if scale != 1.0 { (*g * scale)? } else { (*g).clone() }.detach();
            let m_prev = match self.m.get(*name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(*name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * h.beta1)? + (&g * (1.0 - h.beta1))?)?.detach();
            let v = ((v_prev * h.beta2)? + (g.sqr()? * (1.0 - h.beta2))?)?.detach();
            let denom = ((&v / bc2)?.sqrt()? + h.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let theta = var.as_tensor();
            let decayed = if h.weight_decay > 0.0 && theta.rank() >= 2 {
                (theta * (1.0 - lr * h.weight_decay))?
            } else {
                theta.clone()
            };
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert((*name).clone(), m);
            self.v.insert((*name).clone(), v);
        }
        Ok(StepInfo {
            grad_norm,
            updated: live.len(),
        })
    }

    /// Moment tensors as `m.{name}` / `v.{name}`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.m
            .iter()
            .map(|(n, t)| (format!("m.{n}"), t.clone()))
            .chain(self.v.iter().map(|(n, t)| (format!("v.{n}"), t.clone())))
            .collect()
    }

    /// Rebuilds an optimizer from [`state_tensors`](Self::state_tensors).
    pub fn from_state(hyper: AdamWHyper, step: u64, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut opt = Self::new(hyper);
        opt.step = step;
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("m.") {
                opt.m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("v.") {
                opt.v.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unknown optimizer tensor {name}")));
            }
        }
        if opt.m.len() != opt.v.len() || opt.m.keys().ne(opt.v.keys()) {
            return Err(Error::Checkpoint("optimizer moments are incomplete".into()));
        }
        Ok(opt)
    }
}

/// Global L2 norm of the gradients of `params`.
pub fn grad_norm(params: &[(String, Var)], grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for (_, v) in params {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}
