//! Datasets, query pools and transfer sets.

mod idx;
mod pool;
mod synth;
mod transfer;

use serde::{Deserialize, Serialize};

pub use idx::{load_idx_images, load_mnist_idx, read_idx, write_idx, IdxArray};
pub use pool::{sample_queries, QueryPool, QuerySample};
pub use synth::synth_blobs;
pub use transfer::{Audit, InputRef, PoolRef, TransferRecord, TransferSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Inputs with hard labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.batch_len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: inputs.batch_len(),
                right: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {l} outside [0, {num_classes})")));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.inputs.sample_shape()
    }

    /// Row-major `n × K` one-hot encoding of the labels.
    pub fn one_hot_targets(&self) -> Vec<f64> {
        let k = self.num_classes;
        let mut out = vec![0.0; self.len() * k];
        for (i, &l) in self.labels.iter().enumerate() {
            out[i * k + l] = 1.0;
        }
        out
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
        }
    }

    /// Same data with each sample reshaped (e.g. flat vectors to `[1, H, W]`).
    pub fn reshape_samples(mut self, sample_shape: &[usize]) -> Result<Self> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(sample_shape);
        self.inputs = self.inputs.reshape(shape)?;
        Ok(self)
    }

    /// Deterministic train/test partition holding out the last `test_fraction`
    /// of each class.
    pub fn stratified_split(&self, test_fraction: f64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for idx in by_class {
            let cut = idx.len() - (idx.len() as f64 * test_fraction).round() as usize;
            train.extend_from_slice(&idx[..cut]);
            test.extend_from_slice(&idx[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train, Split::Train), self.subset(&test, Split::Test)))
    }
}
