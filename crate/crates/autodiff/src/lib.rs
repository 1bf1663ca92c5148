//! Reverse-mode automatic differentiation over dense `f64` tensors of rank at
//! most three.
//!
//! Operations are recorded on a [`Tape`] as they execute. Broadcasting is only
//! supported between a tensor and a rank-0 tensor; every other shape change is
//! an explicit op (`expand`, `reshape`, `concat`, `slice`).

mod error;
mod gemm;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};
