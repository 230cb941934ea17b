//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Primitives append
//! nodes; [`Tape::backward`] sweeps them in reverse once.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_many, Coords};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests;
