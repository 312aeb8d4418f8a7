//! Adam with bias correction over flat parameter vectors.

use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self::with_hyper(len, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            count: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.count
    }
}

/// One Adam update. Rejects non-finite gradients before touching the
/// parameters and re-validates the parameters afterwards, so a poisoned
/// step can never survive silently.
pub fn adam_step(state: &mut AdamState, params: &mut ParamVector, grads: &ParamVector) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Usage(format!(
            "adam: length mismatch (params {}, grads {}, state {})",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    grads.ensure_finite("adam gradients")?;
    state.count += 1;
    let t = state.count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let g = grads.values();
    let p = params.values_mut();
    for i in 0..p.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        p[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    params.ensure_finite("parameters after adam step")?;
    Ok(())
}
