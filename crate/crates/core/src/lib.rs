pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod nn;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
