//! AdaMax: Adam with an infinity-norm second moment.
//!
//! ```text
//! m_t = β1·m_{t-1} + (1 − β1)·g
//! u_t = max(β2·u_{t-1}, |g|)
//! θ_t = θ_{t-1} − (lr / (1 − β1^t)) · m_t / (u_t + ε)
//! ```

use serde::{Deserialize, Serialize};

use super::network::{GradientBundle, ModelParams};
use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: GradientBundle,
    pub inf_norm: GradientBundle,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamaxConfig) -> Result<Self> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        if !in_unit(config.beta1) || !in_unit(config.beta2) {
            return Err(Error::InvalidConfig("betas must lie in (0, 1)".into()));
        }
        Ok(Self {
            step_count: 0,
            first_moment: GradientBundle::zeros_like(params),
            inf_norm: GradientBundle::zeros_like(params),
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        })
    }
}

/// One AdaMax update. Parameters and state are taken by value and returned
/// updated.
pub fn adamax_step(
    mut params: ModelParams,
    grads: &GradientBundle,
    mut state: OptimizerState,
) -> Result<(ModelParams, OptimizerState)> {
    if !grads.matches_shape(&params)
        || !state.first_moment.matches_shape(&params)
        || !state.inf_norm.matches_shape(&params)
    {
        return Err(Error::Shape(
            "gradient or optimizer state does not match parameter shapes".into(),
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let step = state.learning_rate / (1.0 - b1.powi(t));

    let theta = params.flat_mut();
    let m = state.first_moment.flat_mut();
    let u = state.inf_norm.flat_mut();
    for (((theta, m), u), g) in theta.into_iter().zip(m).zip(u).zip(grads.iter_flat()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *u = (b2 * *u).max(g.abs());
        *theta -= step * *m / (*u + eps);
    }
    Ok((params, state))
}
