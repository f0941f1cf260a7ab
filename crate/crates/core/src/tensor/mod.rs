//! Dense arrays and the reverse-mode tape that differentiates through them.

mod array;
pub mod gradcheck;
mod tape;

pub use array::Tensor;
pub use gradcheck::{finite_difference_oracle, relative_error, NumericGrad};
pub use tape::{CustomOp, Tape, TapeMode, Var};

#[cfg(test)]
pub(crate) use tape::softplus;
