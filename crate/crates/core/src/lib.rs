//! CPU-only depth estimation models on a minimal f64 autodiff core.
//!
//! The crate provides:
//!
//! - [`tensor`]: dense tensors with a reverse-mode differentiation tape
//!   covering exactly the operations the two networks need, plus
//!   finite-difference gradient checking;
//! - [`blocks`]: composable conv/BN/activation building blocks, seeded
//!   parameter initialization, and parameter/MAC counting;
//! - [`mono`]: the monocular depth autoencoder (4-1-4 and 3-1-3 variants)
//!   with its L1 / SSIM / smoothness losses;
//! - [`stereo`]: the four-stage anytime stereo network with cost volumes,
//!   warping, soft-argmin regression and spatial-propagation refinement;
//! - [`data`]: PFM / PPM / PGM file formats, resizing, deterministic splits,
//!   synthetic scene generation and point-cloud export;
//! - [`train`]: SGD/Adam optimizers, deterministic training loops,
//!   evaluation, and bit-exact checkpointing;
//! - [`report`]: metric reports with box-plot aggregates.
//!
//! The reference configuration is 64-bit floats, single-threaded, and fully
//! deterministic given a seed.

pub mod blocks;
pub mod checkpoint;
pub mod data;
mod error;
pub mod mono;
pub mod report;
pub mod rng;
pub mod ssim;
pub mod stereo;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
