//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records primitives as they execute; [`Tape::backward`] walks the
//! record in reverse and returns [`Gradients`] for every leaf created with
//! [`Tape::param`].
//!
//! ```
//! use diffmath::{Array, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Array::scalar(3.0).unwrap());
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
//! ```
//!
//! Broadcasting is limited to leading-axis expansion: the smaller operand's
//! shape must be a suffix of the larger one. Reductions accumulate left to
//! right, so a forward pass is bit-reproducible.

mod array;
mod check;
mod error;
mod kernels;
mod tape;

pub use array::Array;
pub use check::grad_check;
pub use kernels::gemm;
pub use error::{DiffError, Result};
pub use tape::{sigmoid, softplus, CustomVjp, Gradients, Primitive, Tape, Var};

/// Slope of the leaky ReLU used throughout the models.
pub const LEAKY_SLOPE: f64 = 0.01;
