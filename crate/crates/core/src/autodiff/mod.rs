//! Dense tensors and reverse-mode differentiation.

mod ops;
mod tape;
mod tensor;

pub use ops::concat;
pub(crate) use tape::Backward;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
