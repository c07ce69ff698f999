use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
    AdaDelta,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const RMSPROP_DECAY: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;
pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;

pub const LEARNING_RATE_RANGE: (f64, f64) = (1e-5, 1.0);
pub const WEIGHT_DECAY_RANGE: (f64, f64) = (1e-10, 0.1);
pub const GRAD_NORM_RANGE: (f64, f64) = (1.0, 1000.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// L2 weight added to each trainable gradient; 0 disables it.
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        if !in_range(self.learning_rate, LEARNING_RATE_RANGE) {
            return Err(Error::Config(format!("learning rate {} out of range", self.learning_rate)));
        }
        if self.weight_decay != 0.0 && !in_range(self.weight_decay, WEIGHT_DECAY_RANGE) {
            return Err(Error::Config(format!("weight decay {} out of range", self.weight_decay)));
        }
        if !in_range(self.max_grad_norm, GRAD_NORM_RANGE) {
            return Err(Error::Config(format!("max grad norm {} out of range", self.max_grad_norm)));
        }
        Ok(())
    }
}

/// Per-parameter moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Allocates accumulators matching `store`.
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || -> Vec<Vec<f64>> { store.values().iter().map(|t| vec![0.0; t.len()]).collect() };
        Ok(OptimizerState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        })
    }

    /// State with no accumulators; stepping it fails until rebuilt with
    /// [`OptimizerState::new`].
    pub fn uninitialized(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Scales all gradients by `max_norm / g` when their global L2 norm `g`
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_by_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * scale) as f32);
        }
    }
    norm
}

/// Clips only the gradients of trainable parameters.
pub fn clip_trainable(store: &mut ParamStore, max_norm: f64) -> f64 {
    let flags = store.trainable_flags().to_vec();
    let grads = store.grads_mut();
    let norm = grads
        .iter()
        .zip(&flags)
        .filter(|(_, &t)| t)
        .map(|(g, _)| g.sum_sq())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (g, _) in grads.iter_mut().zip(&flags).filter(|(_, &t)| t) {
            g.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * scale) as f32);
        }
    }
    norm
}

/// Applies one update to every trainable parameter from its accumulated
/// gradient. Frozen parameters are not touched.
pub fn optimizer_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.first.len() != store.len()
        || state
            .first
            .iter()
            .zip(store.values())
            .any(|(m, v)| m.len() != v.len())
    {
        return Err(Error::State("optimizer accumulators do not match the parameters".into()));
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as f64;
    let bias1 = 1.0 - ADAM_BETA1.powf(t);
    let bias2 = 1.0 - ADAM_BETA2.powf(t);
    let (values, grads, flags) = store.update_view();
    for (idx, value) in values.iter_mut().enumerate() {
        if !flags[idx] {
            continue;
        }
        let grad = grads[idx].data();
        let m = &mut state.first[idx];
        let v = &mut state.second[idx];
        for (k, w) in value.data_mut().iter_mut().enumerate() {
            let wf = *w as f64;
            let g = grad[k] as f64 + cfg.weight_decay * wf;
            let delta = match cfg.kind {
                OptimizerKind::Adam => {
                    m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
                    v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = m[k] / bias1;
                    let v_hat = v[k] / bias2;
                    -cfg.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS)
                }
                OptimizerKind::RmsProp => {
                    v[k] = RMSPROP_DECAY * v[k] + (1.0 - RMSPROP_DECAY) * g * g;
                    -cfg.learning_rate * g / (v[k].sqrt() + RMSPROP_EPS)
                }
                OptimizerKind::AdaDelta => {
                    // v: running E[g^2], m: running E[dx^2].
                    v[k] = ADADELTA_RHO * v[k] + (1.0 - ADADELTA_RHO) * g * g;
                    let dx = -((m[k] + ADADELTA_EPS).sqrt() / (v[k] + ADADELTA_EPS).sqrt()) * g;
                    m[k] = ADADELTA_RHO * m[k] + (1.0 - ADADELTA_RHO) * dx * dx;
                    cfg.learning_rate * dx
                }
            };
            *w = (wf + delta) as f32;
        }
    }
    Ok(())
}
