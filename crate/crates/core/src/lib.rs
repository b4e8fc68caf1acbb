//! Implicitly differentiated value-iteration planners.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod envs;
pub mod error;
pub mod gradients;
pub mod ops;
pub mod planners;
pub mod solvers;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;
