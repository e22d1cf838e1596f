//! Adam with L2 weight decay, batch-scaled learning rate, cosine decay.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar};

/// `base * batch_size / 256` for the effective batch.
pub fn pretrain_lr(base: f64, batch_size: usize) -> f64 {
    base * batch_size as f64 / 256.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    /// `base * 0.5 * (1 + cos(pi t / T))`.
    pub fn lr(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::ScheduleExhausted {
                step: t,
                total: self.total_steps,
            });
        }
        if self.total_steps == 0 {
            return Ok(self.base_lr);
        }
        Ok(self.base_lr * 0.5 * (1.0 + (PI * t as f64 / self.total_steps as f64).cos()))
    }
}

pub fn cosine_lr(schedule: &CosineSchedule, t: usize) -> Result<f64> {
    schedule.lr(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of adding `wd * w` to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            decoupled: false,
        }
    }
}

/// Moment buffers and step count. Moments are kept in fp64.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    t: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState {
            config,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of every active parameter.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let ids: Vec<ParamId> = store.active_ids().collect();
    if let Some(&missing) = ids.iter().find(|&&id| store.get(id).grad().is_none()) {
        return Err(Error::IncompleteBackward(store.name(missing).to_string()));
    }
    state.t += 1;
    let cfg = state.config;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for id in ids {
        let tensor = store.get_mut(id);
        let n = tensor.numel();
        let (m, v) = state.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let grad: Vec<f64> = tensor.grad().unwrap_or_default().iter().map(|g| g.as_f64()).collect();
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            let wf = w.as_f64();
            let g = if cfg.decoupled { grad[i] } else { grad[i] + cfg.weight_decay * wf };
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            let mut next = wf - lr * update;
            if cfg.decoupled {
                next -= lr * cfg.weight_decay * wf;
            }
            *w = T::lit(next);
        }
    }
    Ok(())
}
