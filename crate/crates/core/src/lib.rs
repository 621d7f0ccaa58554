//! Multimodal egocentric path generation for driving scenes.
//!
//! The crate couples a procedural scene generator with an attentive
//! adversarial path model: a small convolutional feature extractor turns a
//! rendered front-view raster into visual context vectors, an autoregressive
//! generator rolls out candidate paths conditioned on a driving intention and
//! speed, and a discriminator pair scores path realism, intention consistency,
//! and the realism of per-position intention sequences.
//!
//! Everything runs on `f64` through a small tape-based reverse-mode autodiff
//! engine (`tape`), so analytic gradients of every objective can be checked
//! against finite differences.

pub mod action;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod params;
pub mod scenes;
pub mod tape;
pub mod tensor;
pub mod training;

pub use action::{Action, ACTION_COUNT};
pub use error::{Error, Result};
pub use tensor::Tensor;
