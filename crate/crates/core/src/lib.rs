//! Core algorithms for diffusion-based nuclei data augmentation.
//!
//! Everything in this crate is pure computation over in-memory rasters and
//! needs only `alloc`. File formats, the command line and parallel fan-out
//! live in the `nudiff` companion crate.
//!
//! The pieces:
//!
//! - [`structure`]: instance map <-> three-channel nuclei structure, with a
//!   marker-controlled watershed for the decoding direction.
//! - [`diffusion`]: variance schedule, forward noising, ancestral sampling and
//!   classifier-free guidance.
//! - [`nn`]: the noise-prediction U-Net (self-attention, SPADE conditioning),
//!   hand-written backpropagation, AdamW and the training loop.
//! - [`dataset`]: patch tiling, handcrafted patch features, k-means and
//!   labeled-subset selection.
//! - [`metrics`]: Dice and Aggregated Jaccard Index.

#![no_std]
// With std linked the float methods resolve inherently.
#![cfg_attr(any(test, feature = "std"), allow(unused_imports))]

#[cfg(test)]
extern crate std;

extern crate alloc;

pub mod dataset;
pub mod diffusion;
mod error;
pub mod metrics;
pub mod nn;
mod raster;
mod real;
pub mod rng;
pub mod structure;
pub mod toy;

pub use error::{Error, Result};
pub use raster::{FeatureMap, ImageRaster, InstanceMap, Raster};
pub use real::Real;
