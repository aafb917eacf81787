//! Sample-free variational Bayesian deep learning with end-to-end moment
//! propagation.
//!
//! The crate propagates Gaussian means and variances in closed form through
//! an attentive squeeze-and-excitation ResNet (variational dense and
//! convolutional layers under local reparameterization, moment-matched ReLU
//! and sigmoid, max co-pooling or attentive pooling, multi-head global
//! attention), uses the propagated epistemic uncertainty for data-specific
//! label smoothing, and ships the training loop, calibration metrics, audio
//! front-end, and Monte-Carlo oracles that validate every closed-form
//! moment formula.

pub mod activations;
pub mod audio;
pub mod config;
pub mod error;
pub mod gaussian;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod oracle;
pub mod pooling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use gaussian::{GaussVar, GaussianTensor};
pub use tensor::{Padding, Tensor};
