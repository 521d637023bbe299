//! Two-level (inner/outer) vision transformer with a distillation token.
//!
//! The crate provides, bottom up:
//!
//! - [`tensor`]: dense f64 tensors on a reverse-mode differentiation tape
//! - [`nn`]: attention, MLP and layer-norm building blocks
//! - [`titn`]: the full model, parameter/FLOP accounting, patch extraction
//! - [`checkpoint`]: the flat binary model container
//! - [`augment`]: CutMix, crop, flip and normalization over raw images
//! - [`distill`]: the hybrid CutMix/hard-distillation loss and teachers
//! - [`pipeline`]: datasets, SGD with cosine annealing, metrics, training
//! - [`gradcheck`]: finite-difference verification helpers

pub mod augment;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod titn;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
pub use titn::{ModelConfig, TitnModel};
