//! Space-time video super-resolution at desk scale.
//!
//! The network turns `n+1` low-resolution, low-frame-rate frames into
//! `2n+1` frames at 4x spatial resolution, propagating features backward
//! and then forward through recurrent cells that align hidden states with
//! deformable convolutions, fusing the two directions with cross-gated
//! blocks, and reconstructing frames together with their structure
//! (low-frequency) and detail (residue) components.
//!
//! Everything is CPU-only and deterministic for a fixed seed. The autodiff
//! engine is a per-sample tape over dense tensors; `f64` backs the gradient
//! checks, `f32` the training path.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tensor};
