//! The convolutional classifier: layer kernels, network model, Adam,
//! training loop and the whole-network gradient audit.

mod adam;
mod gradcheck;
pub mod layers;
mod model;
mod train;

use thiserror::Error;

use crate::tensor::TensorError;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, LayerCheck};
pub use layers::{Mode, Padding};
pub use model::{Architecture, CnnModel, ForwardPass, Gradients, LayerParams, LayerSpec};
pub(crate) use train::argmax;
pub use train::{evaluate, fit, fit_with, EpochStats, Evaluation, TrainConfig};

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid label: {0}")]
    Label(String),
    #[error("non-finite gradient in parameter tensor {tensor} at index {index}")]
    NonFiniteGradient { tensor: usize, index: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
