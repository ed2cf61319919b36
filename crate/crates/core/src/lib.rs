//! Core algorithms for sim-to-real crop detection.
//!
//! Everything here is `no_std` + `alloc`: a small reverse-mode tensor
//! engine, the reference grid detector, the CycleGAN translator with its
//! detector-consistency loss, synthetic scene compositing, crop-row line
//! fitting and detection metrics. File formats, checkpoints and the CLI live
//! in the `dtmars` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod bbox;
pub mod detector;
mod error;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod pseudoreal;
pub mod raster;
pub mod rng;
pub mod rowgeom;
pub mod scalar;
pub mod sprites;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

/// Side length of every image that enters a network.
pub const IMAGE_SIZE: usize = 224;
