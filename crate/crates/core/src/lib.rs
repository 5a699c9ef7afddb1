pub mod checkpoint;
pub mod codebook;
pub mod encoders;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
