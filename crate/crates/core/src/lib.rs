//! Burst alignment and merging for raw Bayer captures.
//!
//! The pipeline converts each frame to half-resolution grayscale, estimates
//! per-tile motion coarse-to-fine on Gaussian pyramids, merges the aligned
//! tiles per color plane with a pairwise Wiener filter in the 2D DFT domain,
//! and finally renders the merged mosaic to 8-bit sRGB.

pub mod align;
pub mod burst_io;
pub mod error;
pub mod fft2;
pub mod finish;
pub mod merge;
pub mod pipeline;
pub mod pyramid;
pub mod synthbench;

pub use burst_io::{BayerFrame, BurstMetadata, Cfa, NoiseParams, PlaneId, RawBurst, Rgb8Image};
pub use error::{Error, Result};
pub use pyramid::{GrayImage, Pyramid};
