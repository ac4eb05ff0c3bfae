//! Dense arrays and reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::stft_frames;
pub use tensor::Tensor;
