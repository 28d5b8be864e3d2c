//! Adam with bias correction and per-parameter step sizes.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One descent step: `params -= eta * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    params: &mut [f64],
    gradient: &[f64],
    state: &mut AdamState,
    eta: &[f64],
) -> Result<()> {
    assert_eq!(params.len(), gradient.len());
    assert_eq!(params.len(), state.first.len());
    assert_eq!(params.len(), eta.len());
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        state.first[i] = state.beta1 * state.first[i] + (1.0 - state.beta1) * gradient[i];
        state.second[i] =
            state.beta2 * state.second[i] + (1.0 - state.beta2) * gradient[i] * gradient[i];
        let m_hat = state.first[i] / bc1;
        let v_hat = state.second[i] / bc2;
        params[i] -= eta[i] * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
