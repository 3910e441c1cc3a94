//! Differentiable dense network, AdaMax, and the finite-difference oracle.

mod gradcheck;
mod network;
mod optimizer;

pub use gradcheck::{central_difference, finite_diff_grad, max_relative_error, network_loss};
pub use network::{backward, backward_train, forward, init_params, GradientBundle, ModelParams};
pub use optimizer::{
    adamax_step, AdamaxConfig, OptimizerState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON,
    DEFAULT_LEARNING_RATE,
};
