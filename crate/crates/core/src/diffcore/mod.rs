//! Reverse-mode differentiation over a small set of tensor primitives, plus
//! the Adam optimizer that drives every training phase.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, relative_error};
pub use params::{AdamConfig, Grads, ParamId, ParameterSet};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
