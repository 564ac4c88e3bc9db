//! Dataset, checkpoint and config formats plus the training pipeline on top
//! of [`diffvqa_core`].

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod llm;
pub mod pgm;
pub mod pipeline;

pub use diffvqa_core as core;
pub use error::{Error, Result};
