//! Compressed learning: a linear sensing stage trained jointly with a
//! convolutional classifier that operates on the measurements.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and numeric kernels.
//! - [`graph`]: differentiable layers and networks.
//! - [`mnist`]: IDX parsing, normalization and batching.
//! - [`model`]: the proposed and baseline networks, sensing-stage detachment.
//! - [`container`]: the binary model / sensing-matrix / checkpoint format.
//! - [`train`]: mini-batch SGD with checkpoint and resume.
//! - [`eval`]: classification error and sensing-rate sweeps.
//! - [`gradcheck`]: finite-difference checks of the backward passes.

pub mod container;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod mnist;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{LossFn, Network};
pub use model::{ModelKind, SensingConfig, SensingMatrix};
pub use tensor::{Scalar, Tensor};
