//! Adam with bias correction over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// One Adam update, ascending the negative gradient. `step_sizes` holds a
/// learning rate per parameter so groups can move at different speeds.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    step_sizes: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || step_sizes.len() != n || state.len() != n {
        return Err(Error::shape(format!(
            "adam_step: params {n}, grads {}, step sizes {}, state {}",
            grads.len(),
            step_sizes.len(),
            state.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        let m = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        params[i] -= step_sizes[i] * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// [`adam_step`] with one learning rate for every parameter.
pub fn adam_step_uniform(
    params: &mut [f64],
    grads: &[f64],
    step_size: f64,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let lrs = vec![step_size; params.len()];
    adam_step(params, grads, &lrs, state, cfg)
}
