// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense fp64 tensors with tape-based reverse-mode differentiation.
//!
//! The op set is the closure needed by the toy transformers and the step
//! functions: elementwise arithmetic with trailing-axis broadcasting,
//! `matmul`, `softmax`, `layer_norm`, `embedding`, `concat`, `slice`,
//! reductions, `power` and seeded `dropout`.
//!
//! ```
//! use seqattr::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum_all(sq).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference_check, FiniteDifferenceReport, KINK_TOLERANCE};
pub use tape::{Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
