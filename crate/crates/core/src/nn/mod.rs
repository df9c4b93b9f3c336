//! Differentiable building blocks assembled from the autodiff tape: parameter
//! initialization, the partition-guided convolutional layer, dense units, and
//! the multi-scale motion-compensation network.

pub mod dense;
pub mod guided;
pub mod init;
pub mod mc;

pub use dense::DenseUnit;
pub use guided::GuidedConv;
pub use mc::{McNet, McOutput};

/// Channels produced by every non-final dense-unit layer.
pub const GROWTH: usize = 12;

/// Feature maps produced by the guided convolutional layer.
pub const GUIDED_OUT: usize = 16;

/// Initial slope for all PReLU activations.
pub const PRELU_INIT: f64 = 0.25;
