//! Adam with optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
    /// Multiplicative step-size decay applied once per epoch.
    pub lr_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lr_decay: 1.0,
            clip_norm: Some(5.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("{path}.{field}"), msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(name, format!("must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps", format!("must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", format!("must lie in (0, 1], got {}", self.lr_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm", format!("must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Step size in effect during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParameterStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rebuilds optimizer state saved by [`Adam::state`].
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        Adam { config, step, m, v }
    }

    pub fn state(&self) -> (u64, &[Vec<T>], &[Vec<T>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParameterStore<T>, grads: &Gradients<T>, epoch: usize) -> StepStats {
        let grad_norm = grads
            .params()
            .flat_map(|(_, g)| g.iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let lr = T::lit(c.lr_at(epoch) * bc2.sqrt() / bc1);
        let eps = T::lit(c.eps * bc2.sqrt());
        let (scale_t, wd) = (T::lit(scale), T::lit(c.weight_decay));
        for (ParamId(id), g) in grads.params() {
            let w = store.get_mut(ParamId(id)).data_mut();
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for k in 0..w.len() {
                let gk = g[k] * scale_t + wd * w[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                w[k] -= lr * m[k] / (v[k].sqrt() + eps);
            }
        }
        StepStats {
            grad_norm,
            clipped: scale < 1.0,
        }
    }
}
