//! Dense tensors with reverse-mode differentiation.
//!
//! Every op records its inputs and a closure mapping the output gradient back
//! to them whenever any input requires a gradient. [`Tensor::backward`] walks
//! that graph from a scalar loss in a fixed post-order, so repeated runs
//! produce bit-identical gradients.
//!
//! Broadcasting is deliberately narrow: a right-hand operand may match the
//! trailing axes of the left one (or be a single element), nothing else.
//!
//! Training runs in `f32`; the same code instantiated at `f64` backs the
//! finite-difference checks in [`gradcheck`].

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod ops;
mod scalar;
mod store;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, GradCheck, GradCheckEntry, GradCheckReport};
pub use ops::IGNORE_INDEX;
pub use scalar::Scalar;
pub use store::{Bindings, Gradients, Param, ParameterStore};
pub use tensor::Tensor;
