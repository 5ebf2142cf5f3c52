//! Deterministic feedforward network engine: dense and 2-D convolution
//! layers, activation taps, SGD training and `PCPT` checkpoints.
//!
//! Every layer (nonlinearities and flatten included) contributes its output
//! to the global neuron ordering, so a tap vector of one forward pass has
//! exactly [`ModelGraph::neuron_count`] entries.

mod checkpoint;
mod layer;
mod model;
mod tensor;
mod train;

use thiserror::Error;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, checkpoint_load, checkpoint_save, MODEL_KIND};
pub use layer::LayerSpec;
pub use model::{build_model, default_architecture, ActivationVector, ModelGraph, NeuronId};
pub use tensor::Tensor;
pub use train::{
    accuracy, example_loss, gradient_check, loss_and_grad, relative_error, sgd_fit, sgd_fit_with, FitOutcome, GradientCheck, Gradients,
    Hyper, LabeledData,
};

pub use layer::sigmoid;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("specification error: {0}")]
    Spec(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite activation produced by layer {layer}")]
    NumericFault { layer: usize },
    #[error("training diverged in epoch {epoch} (last finite epoch: {})", history.len().checked_sub(1).map_or("none".to_string(), |e| e.to_string()))]
    Diverged { epoch: usize, history: Vec<f64> },
    #[error(transparent)]
    Checkpoint(#[from] crate::container::ContainerError),
}

impl NnError {
    /// Non-finite values during a forward pass or training.
    pub fn is_numeric(&self) -> bool {
        matches!(self, NnError::NumericFault { .. } | NnError::Diverged { .. })
    }
}
