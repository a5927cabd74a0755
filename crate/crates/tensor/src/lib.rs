//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records each primitive as it runs; [`Tape::backward`] replays the
//! record in reverse from a scalar root. Parameters live in a [`ParamSet`]
//! owned by whichever component trains them, and enter a tape by reference.

mod error;
pub mod gradcheck;
pub mod ops;
mod param;
mod shape;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::loss::IGNORE_LABEL;
pub use param::{ParamId, ParamSet, Parameter};
pub use shape::Shape;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
