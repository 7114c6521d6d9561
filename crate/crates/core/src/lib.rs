//! Bilateral convolution on sparse permutohedral lattices and a point-cloud
//! segmentation network built from it.
//!
//! The crate is layered bottom-up:
//!
//! - [`lattice`]: elevation onto the permutohedral lattice, simplex
//!   location, the occupied-vertex index and neighbor adjacency.
//! - [`bcl`]: splat, lattice convolution, slice, density normalization and
//!   their gradients.
//! - [`network`]: architecture strings, parameters, forward and backward
//!   passes.
//! - [`train`]: cross-entropy loss, Adam, augmentation and the training
//!   loop.
//! - [`data`]: point clouds, PLY/XYZ files, dataset splits and IoU metrics.
//! - [`checkpoint`]: the binary checkpoint format.

pub mod bcl;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod lattice;
pub mod matrix;
pub mod network;
pub mod train;

pub use error::{Error, Result};
pub use matrix::FeatureMatrix;

// The guide's chapters are compiled here so `cargo test --doc` runs every
// snippet in book/src.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/lattice.md")]
    mod lattice {}
    #[doc = include_str!("../../../book/src/bcl.md")]
    mod bcl {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
}
