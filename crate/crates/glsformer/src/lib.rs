//! Gated long/short two-stream video transformer for online step
//! recognition, with a synthetic step-structured dataset, a training
//! harness, evaluation metrics and ribbon rendering.

pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod sampler;
pub mod synth;
pub mod train;

pub use error::GlsError;

pub type Result<T> = std::result::Result<T, GlsError>;
