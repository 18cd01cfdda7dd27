//! Minimal reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{GradCheck, GradCheckReport};
pub use params::{AdamConfig, ParamStore};
pub use tape::{Bound, Conv1dOpts, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
