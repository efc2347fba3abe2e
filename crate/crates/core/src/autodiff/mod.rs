//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records each operation as it runs; [`Tape::backward`] replays the
//! record in reverse. Tensors on a tape are never mutated in place.

mod gradcheck;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport, ParamCheck, DEFAULT_STEP, REL_ERROR_FLOOR};
pub use sparse::{CsrMatrix, EdgePattern};
pub use tape::{Gradients, NumericMode, Tape, Var, NUMERIC_EPS};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;
