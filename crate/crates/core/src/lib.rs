//! Numeric foundation for the divcon workspace.
//!
//! Everything here is generic over a [`Scalar`] (`f32` or `f64`); the rest of
//! the workspace runs on the `f64` aliases exported at the bottom of this file.

pub mod error;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Double-precision tensor, the default throughout the workspace.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Double-precision differentiation tape.
pub type Tape64 = Tape<f64>;
/// Single-precision differentiation tape.
pub type Tape32 = Tape<f32>;
