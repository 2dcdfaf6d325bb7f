//! Dense layers, the Gaussian NLL loss, reverse-mode gradients and optimizers.

mod dense;
mod loss;
mod network;
mod optim;
mod params;

pub use dense::{dense_forward, Activation};
pub use loss::{gaussian_nll, gaussian_nll_grad, sigma_from_raw, sigmoid, softplus, SIGMA_MIN};
pub use network::{backward, grad_check, LayerSpec, Loss, Network, Tape};
pub use optim::{adam_step, sgd_step, sgd_step_in_place, AdamState, OptimizerKind, OptimizerState};
pub(crate) use params::hex_string;
pub use params::{GradientVector, Layout, ParamVector, TensorDesc};
