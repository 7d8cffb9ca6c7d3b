use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Mat};
use crate::error::{Error, Result};

/// One stage of a feed-forward network.
///
/// Convolutions are stride-1 and unpadded; pooling windows are
/// non-overlapping. Dense layers flatten whatever shape they receive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Fixed per-channel standardization `(x − mean) / std`.
    Normalize { mean: Vec<f64>, std: Vec<f64> },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    MaxPool2d { size: usize },
    Relu,
    Dense { inputs: usize, outputs: usize },
}

impl Layer {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        match self {
            Layer::Normalize { mean, std } => {
                let channels = if input.len() == 3 { input[0] } else { 1 };
                if mean.len() != channels || std.len() != channels {
                    return Err(Error::invalid(format!(
                        "normalize has {} channels, input has {channels}",
                        mean.len()
                    )));
                }
                if std.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::invalid("normalize std must be positive"));
                }
                Ok(input.to_vec())
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => match *input {
                [c, h, w] if c == *in_channels && h >= *kernel && w >= *kernel && *kernel > 0 => {
                    Ok(vec![*out_channels, h - kernel + 1, w - kernel + 1])
                }
                _ => Err(Error::ShapeMismatch {
                    expected: vec![*in_channels, *kernel, *kernel],
                    actual: input.to_vec(),
                }),
            },
            Layer::MaxPool2d { size } => match *input {
                [c, h, w] if *size > 0 && h >= *size && w >= *size => {
                    Ok(vec![c, h / size, w / size])
                }
                _ => Err(Error::ShapeMismatch {
                    expected: vec![0, *size, *size],
                    actual: input.to_vec(),
                }),
            },
            Layer::Relu => Ok(input.to_vec()),
            Layer::Dense { inputs, outputs } => {
                if numel != *inputs {
                    return Err(Error::ShapeMismatch {
                        expected: vec![*inputs],
                        actual: input.to_vec(),
                    });
                }
                Ok(vec![*outputs])
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => out_channels * in_channels * kernel * kernel + out_channels,
            Layer::Dense { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }

    /// Number of inputs feeding each output unit, used for init scaling.
    pub fn fan_in(&self) -> usize {
        match self {
            Layer::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            Layer::Dense { inputs, .. } => *inputs,
            _ => 0,
        }
    }
}

/// Shapes and parameter slice of a layer within a model.
#[derive(Clone, Debug)]
pub(crate) struct Plan {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

impl Plan {
    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }
}

/// Per-layer forward state needed by the backward pass.
pub(crate) enum Saved {
    None,
    /// Flat index (within the sample) of each pooled maximum.
    PoolArgmax(Vec<u32>),
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let p = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oi in 0..ho {
                    let src = &x[ci * h * w + (oi + ki) * w + kj..];
                    dst[oi * wo..(oi + 1) * wo].copy_from_slice(&src[..wo]);
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let p = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * p..(row + 1) * p];
                for oi in 0..ho {
                    let dst = &mut dx[ci * h * w + (oi + ki) * w + kj..];
                    for (d, s) in dst[..wo].iter_mut().zip(&src[oi * wo..(oi + 1) * wo]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Forward pass of one layer over a batch of `n` samples.
pub(crate) fn forward(
    layer: &Layer,
    plan: &Plan,
    params: &[f64],
    x: &[f64],
    n: usize,
) -> (Vec<f64>, Saved) {
    let (il, ol) = (plan.in_len(), plan.out_len());
    let mut y = vec![0.0; n * ol];
    let saved = match layer {
        Layer::Normalize { mean, std } => {
            let per = il / mean.len();
            for (ys, xs) in y.chunks_mut(il).zip(x.chunks(il)) {
                for (ci, (m, s)) in mean.iter().zip(std).enumerate() {
                    for j in ci * per..(ci + 1) * per {
                        ys[j] = (xs[j] - m) / s;
                    }
                }
            }
            Saved::None
        }
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            let (c, h, w, k, o) = (
                *in_channels,
                plan.input[1],
                plan.input[2],
                *kernel,
                *out_channels,
            );
            let ckk = c * k * k;
            let p = ol / o;
            let (weights, bias) = params.split_at(o * ckk);
            let mut col = vec![0.0; ckk * p];
            for (xs, ys) in x.chunks(il).zip(y.chunks_mut(ol)) {
                im2col(xs, c, h, w, k, &mut col);
                for (oi, b) in bias.iter().enumerate() {
                    ys[oi * p..(oi + 1) * p].fill(*b);
                }
                gemm(Mat::new(weights, o, ckk), Mat::new(&col, ckk, p), 1.0, ys);
            }
            Saved::None
        }
        Layer::MaxPool2d { size } => {
            let (c, h, w) = (plan.input[0], plan.input[1], plan.input[2]);
            let (ho, wo) = (plan.output[1], plan.output[2]);
            let mut arg = vec![0u32; n * ol];
            for s in 0..n {
                let xs = &x[s * il..(s + 1) * il];
                for ci in 0..c {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let mut best = usize::MAX;
                            let mut best_v = f64::NEG_INFINITY;
                            for di in 0..*size {
                                for dj in 0..*size {
                                    let idx = ci * h * w + (oi * size + di) * w + oj * size + dj;
                                    if xs[idx] > best_v {
                                        best_v = xs[idx];
                                        best = idx;
                                    }
                                }
                            }
                            let out = s * ol + (ci * ho + oi) * wo + oj;
                            y[out] = best_v;
                            arg[out] = best as u32;
                        }
                    }
                }
            }
            Saved::PoolArgmax(arg)
        }
        Layer::Relu => {
            for (yv, xv) in y.iter_mut().zip(x) {
                *yv = xv.max(0.0);
            }
            Saved::None
        }
        Layer::Dense { inputs, outputs } => {
            let (weights, bias) = params.split_at(inputs * outputs);
            for row in y.chunks_mut(*outputs) {
                row.copy_from_slice(bias);
            }
            gemm(
                Mat::new(x, n, *inputs),
                Mat::new(weights, *outputs, *inputs).t(),
                1.0,
                &mut y,
            );
            Saved::None
        }
    };
    (y, saved)
}

/// Backward pass of one layer over a batch.
///
/// Accumulates parameter gradients into `grad` (this layer's slice) and
/// returns the gradient with respect to the layer input when `need_dx`.
pub(crate) fn backward(
    layer: &Layer,
    plan: &Plan,
    params: &[f64],
    x: &[f64],
    saved: &Saved,
    dy: &[f64],
    n: usize,
    grad: &mut [f64],
    need_dx: bool,
) -> Option<Vec<f64>> {
    let (il, ol) = (plan.in_len(), plan.out_len());
    match layer {
        Layer::Normalize { mean, std } => need_dx.then(|| {
            let per = il / mean.len();
            let mut dx = dy.to_vec();
            for row in dx.chunks_mut(il) {
                for (ci, s) in std.iter().enumerate() {
                    row[ci * per..(ci + 1) * per].iter_mut().for_each(|v| *v /= s);
                }
            }
            dx
        }),
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            let (c, h, w, k, o) = (
                *in_channels,
                plan.input[1],
                plan.input[2],
                *kernel,
                *out_channels,
            );
            let ckk = c * k * k;
            let p = ol / o;
            let weights = &params[..o * ckk];
            let (gw, gb) = grad.split_at_mut(o * ckk);
            let mut col = vec![0.0; ckk * p];
            let mut dcol = vec![0.0; ckk * p];
            let mut dx = if need_dx { vec![0.0; n * il] } else { Vec::new() };
            for s in 0..n {
                let dys = &dy[s * ol..(s + 1) * ol];
                im2col(&x[s * il..(s + 1) * il], c, h, w, k, &mut col);
                gemm(Mat::new(dys, o, p), Mat::new(&col, ckk, p).t(), 1.0, gw);
                for (oi, g) in gb.iter_mut().enumerate() {
                    *g += dys[oi * p..(oi + 1) * p].iter().sum::<f64>();
                }
                if need_dx {
                    gemm(Mat::new(weights, o, ckk).t(), Mat::new(dys, o, p), 0.0, &mut dcol);
                    col2im(&dcol, c, h, w, k, &mut dx[s * il..(s + 1) * il]);
                }
            }
            need_dx.then_some(dx)
        }
        Layer::MaxPool2d { .. } => need_dx.then(|| {
            let Saved::PoolArgmax(arg) = saved else {
                unreachable!("pool layer without saved indices")
            };
            let mut dx = vec![0.0; n * il];
            for (out, (&a, g)) in arg.iter().zip(dy).enumerate() {
                let s = out / ol;
                dx[s * il + a as usize] += g;
            }
            dx
        }),
        Layer::Relu => need_dx.then(|| {
            dy.iter()
                .zip(x)
                .map(|(g, xv)| if *xv > 0.0 { *g } else { 0.0 })
                .collect()
        }),
        Layer::Dense { inputs, outputs } => {
            let weights = &params[..inputs * outputs];
            let (gw, gb) = grad.split_at_mut(inputs * outputs);
            gemm(
                Mat::new(dy, n, *outputs).t(),
                Mat::new(x, n, *inputs),
                1.0,
                gw,
            );
            for row in dy.chunks(*outputs) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            need_dx.then(|| {
                let mut dx = vec![0.0; n * inputs];
                gemm(
                    Mat::new(dy, n, *outputs),
                    Mat::new(weights, *outputs, *inputs),
                    0.0,
                    &mut dx,
                );
                dx
            })
        }
    }
}
