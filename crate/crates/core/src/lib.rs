//! Two-stage vision engine: a boosted Haar cascade proposes regions and a
//! small convolutional network classifies them.

pub mod cnn;
pub mod dataset;
pub mod haar;
pub mod model_io;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use tensor::{Scalar, Tensor, TensorError};
