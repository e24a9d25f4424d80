//! Differentiable numeric kernels: per-cell linear maps, channel
//! normalization, activations, momentum SGD, and a central-difference
//! gradient checker.

pub mod activations;
pub mod gradcheck;
pub mod grid;
pub mod layers;
pub mod params;
pub mod sgd;

pub use activations::{sigmoid, softmax};
pub use gradcheck::{finite_diff_check, numeric_gradient, relative_error, GradCheckReport};
pub use grid::{avg_pool2, avg_pool2_backward, upsample_nearest2, upsample_nearest2_backward, Grid};
pub use layers::{
    channel_norm_backward, channel_norm_forward, linear_backward, linear_forward, relu_backward, relu_forward,
    ChannelNorm, Layer, Linear, Relu, NORM_EPSILON,
};
pub use params::LayerParams;
pub use sgd::{clip_grad_norm, grad_norm, sgd_step, SgdConfig};
