//! Dense-tensor neural engine: convolutions, activations, BCE, Adam and
//! gradient verification.

mod adam;
mod conv;
mod gradcheck;
mod loss;
mod network;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamState, DEFAULT_LEARNING_RATE};
pub use conv::{
    conv2d_backward, conv2d_forward, conv2d_forward_cached, transpose_conv2d_backward, transpose_conv2d_forward,
    ConvGeometry, LayerGrads,
};
pub use gradcheck::{grad_check, grad_check_against, relative_error, GradCheckConfig, GradCheckReport, TensorCheck};
pub use loss::{bce_grad, bce_loss, bce_sigmoid_logit_grad, BCE_CLAMP};
pub use network::{Gradients, LayerKind, LayerSpec, Network, Param, Trace};
pub use tensor::{concat_channels, split_channels, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at {0}")]
    NaNDetected(String),
    #[error("invalid layer graph: {0}")]
    BadGraph(String),
}
