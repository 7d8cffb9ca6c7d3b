//! Named architectures.
//!
//! | id           | layers                                                                 |
//! |--------------|------------------------------------------------------------------------|
//! | `linear`     | dense(K)                                                               |
//! | `mlp`        | dense(64)-relu-dense(K)                                                |
//! | `mlp2`       | dense(256)-relu-dense(256)-relu-dense(K)                               |
//! | `cnn-small`  | conv(6,3×3)-pool-relu-dense(32)-relu-dense(K)                          |
//! | `lenet`      | conv(20,5×5)-pool-relu-conv(50,5×5)-pool-relu-dense(500)-relu-dense(K) |
//! | `lenet-wide` | conv(32,5×5)-pool-relu-conv(64,5×5)-pool-relu-dense(1024)-relu-dense(K)|
//!
//! Convolutional ids need a `[C, H, W]` input; the dense ids flatten any
//! input. Every model may start with a fixed per-channel normalization.

use serde::{Deserialize, Serialize};

use super::layer::Layer;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ARCH_IDS: &[&str] = &["linear", "mlp", "mlp2", "cnn-small", "lenet", "lenet-wide"];

/// Per-channel mean and standard deviation of a set of inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputStats {
    /// Statistics of a batch `[n, C, H, W]` (per channel) or `[n, D]`
    /// (a single pooled channel). Zero deviations are replaced by one.
    pub fn from_batch(xs: &Tensor) -> Self {
        let sample = xs.sample_shape();
        let channels = if sample.len() == 3 { sample[0] } else { 1 };
        let per = xs.sample_len() / channels;
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for i in 0..xs.batch_len() {
            for (c, chunk) in xs.sample(i).chunks(per).enumerate() {
                for v in chunk {
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (xs.batch_len() * per).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                let var = (s / count - *m * *m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        InputStats { mean, std }
    }

    fn layer(&self) -> Layer {
        Layer::Normalize {
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }
}

fn conv_stack(
    input: &[usize],
    k: usize,
    convs: &[(usize, usize)],
    hidden: usize,
) -> Result<Vec<Layer>> {
    let [mut c, mut h, mut w] = *input else {
        return Err(Error::invalid(format!(
            "convolutional architecture needs [C, H, W] input, got {input:?}"
        )));
    };
    let mut layers = Vec::new();
    for &(out, kernel) in convs {
        if h < kernel || w < kernel {
            return Err(Error::invalid(format!("input {input:?} too small for conv stack")));
        }
        layers.push(Layer::Conv2d {
            in_channels: c,
            out_channels: out,
            kernel,
        });
        layers.push(Layer::MaxPool2d { size: 2 });
        layers.push(Layer::Relu);
        c = out;
        h = (h - kernel + 1) / 2;
        w = (w - kernel + 1) / 2;
    }
    layers.push(Layer::Dense {
        inputs: c * h * w,
        outputs: hidden,
    });
    layers.push(Layer::Relu);
    layers.push(Layer::Dense {
        inputs: hidden,
        outputs: k,
    });
    Ok(layers)
}

fn dense_stack(input: &[usize], k: usize, hidden: &[usize]) -> Vec<Layer> {
    let mut width = input.iter().product();
    let mut layers = Vec::new();
    for &h in hidden {
        layers.push(Layer::Dense {
            inputs: width,
            outputs: h,
        });
        layers.push(Layer::Relu);
        width = h;
    }
    layers.push(Layer::Dense {
        inputs: width,
        outputs: k,
    });
    layers
}

/// Builds a freshly initialized model of the named architecture.
pub fn build(
    arch_id: &str,
    input_shape: &[usize],
    num_classes: usize,
    stats: Option<&InputStats>,
    seed: u64,
) -> Result<Model> {
    if num_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    let body = match arch_id {
        "linear" => dense_stack(input_shape, num_classes, &[]),
        "mlp" => dense_stack(input_shape, num_classes, &[64]),
        "mlp2" => dense_stack(input_shape, num_classes, &[256, 256]),
        "cnn-small" => conv_stack(input_shape, num_classes, &[(6, 3)], 32)?,
        "lenet" => conv_stack(input_shape, num_classes, &[(20, 5), (50, 5)], 500)?,
        "lenet-wide" => conv_stack(input_shape, num_classes, &[(32, 5), (64, 5)], 1024)?,
        other => {
            return Err(Error::invalid(format!(
                "unknown architecture {other:?} (known: {ARCH_IDS:?})"
            )))
        }
    };
    let layers = stats
        .map(InputStats::layer)
        .into_iter()
        .chain(body)
        .collect();
    Model::new(arch_id, input_shape.to_vec(), layers, seed)
}
