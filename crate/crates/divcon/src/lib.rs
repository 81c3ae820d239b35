//! Consistency-preserving diverse joint sampling for a toy flow-matching
//! latent video generator.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod harness;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod world;

pub use divcon_core as core;
pub use error::{Error, Result};

/// Scalar type used by the training and sampling pipeline.
pub type Real = f64;
