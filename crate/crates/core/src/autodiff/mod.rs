//! Minimal reverse-mode automatic differentiation over a recorded tape.
//!
//! The primitive set is exactly what the fall-prediction model needs: dense
//! matrix products, per-frame batched contractions, 1-D convolutions along
//! the time and joint axes, elementwise nonlinearities, softmax, dropout,
//! reductions, and slicing. Gradients are verified against central finite
//! differences in [`check`].
//!
//! Tapes are single-threaded; parameter tensors are plain values that can be
//! shared read-only across tapes.

pub mod check;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use check::{grad_check, GradCheckError};
pub use tape::{AutodiffError, Tape, Var};
pub use tensor::{real, Real, Tensor};
