//! Reference forward/backward/training engine for small classifiers.

mod arch;
mod data;
mod network;
mod train;

pub use arch::Arch;
pub use data::{BlobSpec, Dataset, Split, TextureSpec, NND_MAGIC};
pub use network::{Gradients, Network, Param};
pub use train::{
    accumulate_gradients, calibrate_qat, deploy, evaluate, train, EpochMetrics, GradientStats, TrainConfig,
    TrainOutcome,
};
pub(crate) use train::{train_from_epoch, Momentum};

use crate::store::Model;
use crate::Result;

/// Class scores of `model` for a batch of flattened inputs.
pub fn forward(model: &Model, inputs: &[f32]) -> Result<Vec<Vec<f64>>> {
    Network::from_model(model)?.forward(inputs)
}

/// Mean cross-entropy and gradients of `model` on a batch.
pub fn backward(model: &Model, inputs: &[f32], labels: &[usize]) -> Result<(f64, Gradients)> {
    Network::from_model(model)?.backward(inputs, labels)
}

/// Accuracy of `model` on `data`.
pub fn evaluate_model(model: &Model, data: &Dataset) -> Result<f64> {
    evaluate(&Network::from_model(model)?, data)
}
