//! Numeric core of the sticker-video toolkit.
//!
//! Everything here is pure computation over in-memory buffers: a small
//! reverse-mode differentiation engine, the spatial-temporal interaction
//! (STI) layer, pixel-space video diffusion with DDIM sampling, a
//! vector-quantized masked-token baseline, dataset curation rules, a
//! procedural clip generator and evaluation metrics. File formats and the
//! command line live in the `vsd` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod clip;
pub mod curation;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod random;
pub mod sti;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod vq;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
