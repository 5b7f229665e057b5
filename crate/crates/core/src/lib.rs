//! Bidirectional cross-attention transformer (BCAT) for unsupervised domain
//! adaptation, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: `f64` tensors, kernels, reverse-mode autodiff, finite differences.
//! * [`model`]: patch partition, multi-head self/cross attention, the quadruple
//!   block with its four weight-sharing branches, pooling and the classifier.
//! * [`objective`]: cross-entropy, multi-kernel MMD, pseudo-label loss, the
//!   combined loss and temperature-scaled distillation loss.
//! * [`pseudo`]: memory bank with neighbour-averaged pseudo labels.
//! * [`train`]: optimizers, the training and distillation loops, inference.
//! * [`dataio`]: synthetic two-domain data, binary dataset/checkpoint formats, batching.
//! * [`commands`]: the command-line operations as library calls.

pub mod commands;
pub mod config;
pub mod dataio;
pub mod error;
pub mod model;
pub mod objective;
pub mod par;
pub mod pseudo;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
