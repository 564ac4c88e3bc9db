//! Numerical core for saliency-guided difference visual question answering.
//!
//! An image pair (current "main" study and prior "reference" study) is
//! pre-aligned with a near-identity affine warp, a keyword-conditioned
//! Grad-CAM mask shared by both images attenuates non-salient regions, and a
//! small causal encoder-decoder generates the answer.
//!
//! The crate is `no_std` (with `alloc`). File formats, the CLI and
//! multi-worker orchestration live in the `diffvqa` companion crate.
#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checks;
pub mod error;
pub mod keyword;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod registration;
pub mod rng;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
