//! Glyph-to-glyph typeface transformation with a hierarchical adversarial
//! network, built on a self-contained f64 autodiff tensor core.
//!
//! The crate covers the full desk-scale workflow: synthetic or PNG glyph
//! corpora, the encoder / staged-decoder transfer network with its multi-level
//! discriminator, weighted pixel and per-branch adversarial losses, the
//! alternating training loop with checkpointing, and RMSE/APDR evaluation.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use tensor::{Tensor, TensorError};
