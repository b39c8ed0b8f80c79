//! Reverse-mode differentiation over dense row-major matrices.
//!
//! The operator set is closed: matrix products, elementwise products and
//! sums (with row/column broadcasting for biases), relu, log, exp, softmax
//! and log-sum-exp along an axis, axis sums, row gathering and constant
//! scaling. Every value is recorded on a [`Tape`]; [`Tape::backward`]
//! replays it in reverse from a scalar output.
//!
//! ```
//! use autodiff::{Array, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Array::row(vec![1.0, 2.0, 3.0]).unwrap());
//! let lse = tape.logsumexp(x, 1).unwrap();
//! let grads = tape.backward(lse).unwrap();
//! let g = grads.get(x);
//! assert!((g.sum() - 1.0).abs() < 1e-12);
//! ```

mod array;
mod check;
mod tape;

pub use array::Array;
pub use check::{finite_difference_check, FdReport};
pub use tape::{logsumexp_of, Gradients, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Structural(String),
}

pub type Result<T> = std::result::Result<T, Error>;
