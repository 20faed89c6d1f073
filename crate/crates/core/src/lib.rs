//! Numeric core for latent reconstruction-error based detection of
//! diffusion-generated images.
//!
//! Everything here is a pure function of explicit inputs and an explicit
//! seed. There is no file or clock access; the `lare` crate layers IO,
//! file formats and the command line on top.
//!
//! The main pieces:
//!
//! - [`autograd`]: a reverse-mode tape over dense `f64` tensors, used by every
//!   trainable model in the crate.
//! - [`diffusion`]: noise schedules, the closed-form forward process, the
//!   denoiser objective, DDPM ancestral sampling and deterministic DDIM.
//! - [`codec`]: a small autoencoder providing the latent space.
//! - [`lare`]: single-step latent reconstruction error and the multi-step
//!   inversion baseline.
//! - [`backbone`] and [`egre`]: the detector, including error-guided spatial
//!   attention and channel gating.
//! - [`metrics`]: accuracy and average precision.
//! - [`forge`]: the procedural "real" image family.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod backbone;
pub mod codec;
pub mod diffusion;
pub mod egre;
mod error;
pub mod forge;
pub mod gradcheck;
pub mod grid;
pub mod lare;
mod math;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::{GridShape, LatentGrid};
pub use tensor::Tensor;
