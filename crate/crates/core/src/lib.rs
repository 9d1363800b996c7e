pub mod attention;
pub mod dataio;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod reference;
pub mod selftest;
pub mod signal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Grads, Scalar, Tape, Tensor, Var};
