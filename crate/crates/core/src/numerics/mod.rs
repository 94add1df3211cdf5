//! Dense matrix kernels, seeded randomness, and a reverse-mode tape.
//!
//! Conventions used throughout the crate:
//!
//! - all scalars are `f64`, all logarithms natural;
//! - matrices are row-major; a "vector" is an `r x 1` matrix;
//! - `vec(Z)` stacks columns (column-major flattening);
//! - hardmax puts mass `1/|argmax set|` on each maximising row and its
//!   derivative is taken as exactly zero (it is piecewise constant).

mod matrix;
mod rng;
mod tape;

pub use matrix::{hardmax_columns, relu, softmax_columns, Matrix};
pub use rng::{mix_seed, RngStream};
pub use tape::{Gradients, NodeId, Tape};
