//! Spatially-correlative structure losses.
//!
//! A frozen convolutional feature extractor produces features at named tap
//! points; self-similarity maps are built by correlating each sampled query
//! position with the positions of its surrounding patch, and two images are
//! compared through the distance between their maps. The learned variant
//! trains 1x1 selection layers on top of the frozen trunk with a patchwise
//! contrastive loss. All gradients are hand-derived and checked against
//! finite differences.

pub mod error;
#[doc(hidden)]
pub mod fault;
pub mod tensor;
pub mod ops;
pub mod extractor;
pub mod weights;
pub mod selection;
pub mod sampling;
pub mod corr;
pub mod loss;
pub mod augment;
pub mod contrast;
pub mod train;
pub mod adam;
pub mod synth;
pub mod analysis;
pub mod stylize;
pub mod gradcheck;
pub mod colormap;
pub mod io;
pub mod config;
pub mod cli;
pub mod seed;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
