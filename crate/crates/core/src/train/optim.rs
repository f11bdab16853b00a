use std::collections::BTreeMap;

use super::{TrainConfig, TrainError};
use crate::tensor::{ParameterSet, Tensor};

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros = |t: &Tensor| vec![0.0; t.len()];
        Self {
            m: params.iter().map(|(n, t)| (n.clone(), zeros(t))).collect(),
            v: params.iter().map(|(n, t)| (n.clone(), zeros(t))).collect(),
        }
    }
}

/// Linear warmup from 0 to `cfg.lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    debug_assert!(step >= 1 && step <= total_steps);
    let warmup = (cfg.warmup_fraction * total_steps as f64).round() as u64;
    if step <= warmup {
        cfg.lr * step as f64 / warmup as f64
    } else {
        cfg.lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// One AdamW update at step `t` (1-based) with learning rate `lr`.
/// Decoupled weight decay applies only to matrices; biases and layer-norm
/// gains (all 1-D) are not decayed.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    assert!(t >= 1, "adam steps are 1-based");
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, g) in grads {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { name: name.clone() });
        }
    }
    for (name, theta) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.len() != theta.len() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "adamw_step",
                left: theta.shape().to_vec(),
                right: g.shape().to_vec(),
            }
            .into());
        }
        let decay = if theta.shape().len() >= 2 {
            cfg.weight_decay
        } else {
            0.0
        };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((p, &gi), mi), vi) in theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + decay * *p);
        }
    }
    Ok(())
}
