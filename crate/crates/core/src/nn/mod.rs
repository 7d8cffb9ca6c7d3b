//! Small feed-forward network engine with exact manual backpropagation.
//!
//! All math is in `f64`. Models are immutable during inference, so shared
//! references can be used from several threads at once; training mutates
//! parameters and takes `&mut Model`.

pub mod arch;
mod gemm;
mod layer;
mod model;
mod train;

pub use arch::{build, InputStats, ARCH_IDS};
pub use layer::Layer;
pub use model::{
    cross_entropy, softmax_posterior, Checkpoint, GradientVector, JacobianMatrix, Model,
    ParamShape, PROB_FLOOR,
};
pub use train::{fit, sgd_train, Optimizer, Progress, TrainConfig, TrainReport};

/// Fraction of inputs whose argmax prediction matches the label.
pub fn accuracy(model: &Model, data: &crate::data::LabeledDataset) -> crate::Result<f64> {
    if data.is_empty() {
        return Err(crate::Error::invalid("evaluation set is empty"));
    }
    let preds = model.predict_batch(&data.inputs, 256)?;
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, &l)| p.argmax() == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
