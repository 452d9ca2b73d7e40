//! Dense `f64` matrices and a reverse-mode differentiation tape.
//!
//! Everything here is single-threaded and sums left to right, so repeated
//! evaluations of the same graph are bitwise identical.

mod graph;
mod matrix;

#[cfg(test)]
pub(crate) mod fdcheck;

pub use graph::{Graph, LossScalar, NodeId, LAYER_NORM_EPS};
pub use matrix::Matrix;

#[cfg(test)]
mod tests;
