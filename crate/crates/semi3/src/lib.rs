//! Semi3: a three-branch cross-domain embedding network for sketch-based
//! image retrieval, built on a self-contained f64 autodiff engine.
//!
//! The pieces, bottom to top:
//! - [`tensor`]: dense tensors, recorded ops, reverse-mode gradients
//! - [`params`]: named parameters and share-group tying
//! - [`backbone`] / [`attention`]: the convolutional branches and the
//!   channel-wise co-attention model
//! - [`losses`]: alignment, contrastive, cross-entropy, and their weighted sum
//! - [`model`]: the assembled network plus checkpointing
//! - [`data`]: synthetic image/sketch/edgemap triples and the 1:1 pair sampler
//! - [`trainer`]: SGD with momentum and the two-stage training procedure
//! - [`eval`]: cosine-distance ranking and mean average precision
//! - [`gradcheck`]: finite-difference verification of every gradient path

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{GradMap, Recording, Tensor};
