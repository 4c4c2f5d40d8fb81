//! Illuminant estimation for linear RGB images.
//!
//! The crate bundles the statistical estimators of the gray-world / gray-edge
//! family, a small patch-based convolutional network trained from scratch,
//! patch pooling, local illuminant maps and an angular-error evaluation
//! harness. Everything operates on linear radiometric data held in
//! [`LinearImage`].
//!
//! Data-parallel loops (per-patch inference, batch gradients, row filters)
//! go through [`parallel`]; with the default `parallel` feature they run on
//! rayon, without it they run sequentially. Both paths produce bit-identical
//! results.

pub mod cnn;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod image;
pub mod local;
pub mod manifest;
pub mod parallel;
pub mod patch;
pub mod statistics;
pub mod sweep;
pub mod synth;

pub use error::{Error, Result};
pub use image::{Illuminant, LinearImage};
