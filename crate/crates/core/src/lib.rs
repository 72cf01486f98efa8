//! Few-shot conditioned musical source separation.
//!
//! A FiLM-conditioned U-Net separates a target instrument from a mixture,
//! conditioned either on an instrument-class label (baseline) or on 1-5 audio
//! examples of the target (few-shot), optionally fused with negative examples
//! of what not to separate. The crate covers the whole loop at desk scale:
//! a deterministic synthetic multitrack generator, the training-example
//! sampler, joint training of the U-Net and the conditioning encoder,
//! chunked full-track inference with overlap-add, and framewise SDR
//! evaluation.

pub mod cli;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
