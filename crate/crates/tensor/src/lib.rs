//! Minimal tensor engine with reverse-mode differentiation.
//!
//! Provides exactly the operations the z-buffer-to-image network needs:
//! 2-d convolution, nearest upsampling, dense layers, per-channel spatial
//! statistics and a handful of pointwise ops, all recorded on a [`Tape`].

mod element;
mod error;
pub mod gradcheck;
pub mod ops;
mod param;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use param::{ParamId, ParamSet, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
