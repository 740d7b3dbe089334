use serde::{Deserialize, Serialize};

use super::{Checkpoint, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

/// Moment buffers for one [`ParamStore`], in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Every parameter must hold a gradient;
    /// gradients are zeroed afterwards.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            if params.get(id).grad().is_none() {
                return Err(Error::MissingGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let (data, grad) = t.data_and_grad_mut();
            let grad = grad.expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }

    /// Stores the moments as `adam.m.<name>` / `adam.v.<name>` plus the step
    /// count.
    pub fn write_checkpoint(&self, params: &ParamStore, ck: &mut Checkpoint) {
        for (i, (name, t)) in params.iter().enumerate() {
            ck.push(&format!("adam.m.{name}"), t.shape(), self.m[i].clone());
            ck.push(&format!("adam.v.{name}"), t.shape(), self.v[i].clone());
        }
        ck.push("adam.step", &[1], vec![self.step as f64]);
    }

    pub fn read_checkpoint(config: AdamConfig, params: &ParamStore, ck: &Checkpoint) -> Result<Self> {
        let mut state = Self::new(config, params);
        for (i, (name, t)) in params.iter().enumerate() {
            for (prefix, buf) in [("adam.m", &mut state.m[i]), ("adam.v", &mut state.v[i])] {
                let key = format!("{prefix}.{name}");
                let (shape, data) = ck
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
                if shape != t.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam checkpoint",
                        lhs: t.shape().to_vec(),
                        rhs: shape.to_vec(),
                    });
                }
                buf.copy_from_slice(data);
            }
        }
        let (_, step) = ck
            .get("adam.step")
            .ok_or_else(|| Error::Checkpoint("missing `adam.step`".into()))?;
        state.step = step[0] as u64;
        Ok(state)
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        params.scale_grads(max_norm / norm);
    }
    norm
}
