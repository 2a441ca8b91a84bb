pub mod cells;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod stack;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Shape, Tape, Tensor, Var};
