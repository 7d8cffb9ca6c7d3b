use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Mat};
use super::layer::{self, Layer, Plan, Saved};
use crate::error::{Error, Result};
use crate::simplex::Posterior;
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Flat parameter gradient of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// `K × D` matrix whose row `k` is `∇_w log F(x; w)_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl JacobianMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows < 2 {
            return Err(Error::invalid(format!("jacobian needs K ≥ 2 rows, got {rows}")));
        }
        if rows * cols != data.len() {
            return Err(Error::LengthMismatch {
                left: rows * cols,
                right: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("jacobian has non-finite entries"));
        }
        Ok(JacobianMatrix { rows, cols, data })
    }

    /// `K × K` identity, the gradient-free ablation of the defense.
    pub fn identity(k: usize) -> Self {
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            data[i * k + i] = 1.0;
        }
        JacobianMatrix {
            rows: k,
            cols: k,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    /// `G^T y`, the parameter gradient induced by posterior `y`.
    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (k, &yk) in y.iter().enumerate() {
            if yk != 0.0 {
                for (o, g) in out.iter_mut().zip(self.row(k)) {
                    *o += yk * g;
                }
            }
        }
        out
    }

    /// Row Gram matrix `G G^T` (row-major `K × K`).
    pub fn gram(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.rows];
        let g = Mat::new(&self.data, self.rows, self.cols);
        gemm(g, g.t(), 0.0, &mut out);
        out
    }
}

/// Numerically stabilized softmax.
pub fn softmax_posterior(logits: &[f64]) -> Posterior {
    Posterior::from_vec_unchecked(softmax(logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// `−Σ_k target_k · log(pred_k)` with `pred` clamped to `[1e-12, 1]`.
pub fn cross_entropy(pred: &Posterior, target: &Posterior) -> f64 {
    cross_entropy_raw(pred.probs(), target.probs())
}

pub(crate) fn cross_entropy_raw(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.clamp(PROB_FLOOR, 1.0).ln())
        .sum()
}

/// Activations recorded during a batched forward pass.
pub(crate) struct Trace {
    n: usize,
    acts: Vec<Vec<f64>>,
    saved: Vec<Saved>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("at least the input activation")
    }
}

/// A feed-forward classifier with a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Model {
    arch_id: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<f64>,
    plans: Vec<Plan>,
}

impl Model {
    /// Builds a model and draws every weight and bias from
    /// `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(
        arch_id: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        seed: u64,
    ) -> Result<Self> {
        let plans = plan(&input_shape, &layers)?;
        let total = plans.last().map_or(0, |p| p.offset + p.len);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, p) in layers.iter().zip(&plans) {
            if p.len == 0 {
                continue;
            }
            let bound = 1.0 / (l.fan_in() as f64).sqrt();
            for w in &mut params[p.offset..p.offset + p.len] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(Model {
            arch_id: arch_id.into(),
            input_shape,
            layers,
            params,
            plans,
        })
    }

    pub fn from_parts(
        arch_id: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let plans = plan(&input_shape, &layers)?;
        let total = plans.last().map_or(0, |p| p.offset + p.len);
        if params.len() != total {
            return Err(Error::LengthMismatch {
                left: total,
                right: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(Model {
            arch_id: arch_id.into(),
            input_shape,
            layers,
            params,
            plans,
        })
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_classes(&self) -> usize {
        self.plans
            .last()
            .map_or_else(|| self.input_shape.iter().product(), Plan::out_len)
    }

    fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn check_sample(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_batch(&self, xs: &Tensor) -> Result<usize> {
        if xs.shape().is_empty() || xs.sample_shape() != self.input_shape.as_slice() {
            let mut expected = vec![xs.batch_len()];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::ShapeMismatch {
                expected,
                actual: xs.shape().to_vec(),
            });
        }
        Ok(xs.batch_len())
    }

    pub(crate) fn trace(&self, xs: &[f64], n: usize) -> Trace {
        debug_assert_eq!(xs.len(), n * self.input_len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut saved = Vec::with_capacity(self.layers.len());
        acts.push(xs.to_vec());
        for (l, p) in self.layers.iter().zip(&self.plans) {
            let params = &self.params[p.offset..p.offset + p.len];
            let (y, s) = layer::forward(l, p, params, acts.last().unwrap(), n);
            acts.push(y);
            saved.push(s);
        }
        Trace { n, acts, saved }
    }

    /// Back-propagates `dlogits` (gradient of the loss w.r.t. the logits,
    /// row-major `n × K`) through `trace`, accumulating into `grad`.
    /// Returns the input gradient when `need_dx`.
    pub(crate) fn backprop(
        &self,
        trace: &Trace,
        dlogits: &[f64],
        grad: &mut [f64],
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let mut dy = dlogits.to_vec();
        let mut dx = None;
        for (i, (l, p)) in self.layers.iter().zip(&self.plans).enumerate().rev() {
            // Below the first parametrized layer only input gradients matter.
            let want_dx = need_dx || self.plans[..i].iter().any(|q| q.len > 0);
            let params = &self.params[p.offset..p.offset + p.len];
            let g = &mut grad[p.offset..p.offset + p.len];
            match layer::backward(
                l,
                p,
                params,
                &trace.acts[i],
                &trace.saved[i],
                &dy,
                trace.n,
                g,
                want_dx,
            ) {
                Some(d) => dy = d,
                None => return None,
            }
            if i == 0 {
                dx = Some(std::mem::take(&mut dy));
            }
        }
        if self.layers.is_empty() {
            dx = Some(dy);
        }
        dx
    }

    /// Raw class scores for a single input.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_sample(x)?;
        Ok(self.trace(x.data(), 1).acts.pop().unwrap())
    }

    /// Logits for a batch `[n, input_shape..]`, as an `[n, K]` tensor.
    pub fn forward_batch(&self, xs: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(xs)?;
        let logits = self.trace(xs.data(), n).acts.pop().unwrap();
        Ok(Tensor::new(vec![n, self.num_classes()], logits)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Posterior> {
        Ok(softmax_posterior(&self.forward(x)?))
    }

    /// Posteriors for a batch, processed in chunks of `chunk` samples.
    pub fn predict_batch(&self, xs: &Tensor, chunk: usize) -> Result<Vec<Posterior>> {
        let n = self.check_batch(xs)?;
        let per = self.input_len();
        let k = self.num_classes();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let m = chunk.max(1).min(n - start);
            let trace = self.trace(&xs.data()[start * per..(start + m) * per], m);
            out.extend(trace.logits().chunks(k).map(softmax_posterior));
        }
        Ok(out)
    }

    /// Gradient of `cross_entropy(softmax(forward(x)), target)` w.r.t. the
    /// parameters.
    pub fn backward(&self, x: &Tensor, target: &Posterior) -> Result<GradientVector> {
        self.check_sample(x)?;
        if target.num_classes() != self.num_classes() {
            return Err(Error::LengthMismatch {
                left: self.num_classes(),
                right: target.num_classes(),
            });
        }
        let trace = self.trace(x.data(), 1);
        let dz: Vec<f64> = softmax(trace.logits())
            .iter()
            .zip(target.probs())
            .map(|(p, t)| p - t)
            .collect();
        let mut grad = vec![0.0; self.num_params()];
        self.backprop(&trace, &dz, &mut grad, false);
        Ok(GradientVector(grad))
    }

    /// Mean cross-entropy over a batch and its parameter gradient.
    ///
    /// `targets` is row-major `n × K` of soft labels.
    pub fn loss_and_grad(&self, xs: &Tensor, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.check_batch(xs)?;
        let k = self.num_classes();
        if targets.len() != n * k {
            return Err(Error::LengthMismatch {
                left: n * k,
                right: targets.len(),
            });
        }
        let trace = self.trace(xs.data(), n);
        let mut loss = 0.0;
        let mut dz = Vec::with_capacity(n * k);
        for (z, t) in trace.logits().chunks(k).zip(targets.chunks(k)) {
            let p = softmax(z);
            loss += cross_entropy_raw(&p, t);
            dz.extend(p.iter().zip(t).map(|(p, t)| (p - t) / n as f64));
        }
        let mut grad = vec![0.0; self.num_params()];
        self.backprop(&trace, &dz, &mut grad, false);
        Ok((loss / n as f64, grad))
    }

    /// Mean cross-entropy of the model on a batch without gradients.
    pub fn loss(&self, xs: &Tensor, targets: &[f64], chunk: usize) -> Result<f64> {
        let n = self.check_batch(xs)?;
        let k = self.num_classes();
        let preds = self.predict_batch(xs, chunk)?;
        let total: f64 = preds
            .iter()
            .zip(targets.chunks(k))
            .map(|(p, t)| cross_entropy_raw(p.probs(), t))
            .sum();
        Ok(total / n as f64)
    }

    /// Jacobian of the log-likelihoods: one forward pass, then one backward
    /// pass per class with logit gradient `e_k − softmax(z)`.
    pub fn loglik_jacobian(&self, x: &Tensor) -> Result<JacobianMatrix> {
        self.check_sample(x)?;
        let k = self.num_classes();
        let d = self.num_params();
        let trace = self.trace(x.data(), 1);
        let p = softmax(trace.logits());
        let mut data = vec![0.0; k * d];
        for (class, row) in data.chunks_mut(d).enumerate() {
            let dz: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(j, pj)| if j == class { 1.0 - pj } else { -pj })
                .collect();
            self.backprop(&trace, &dz, row, false);
        }
        JacobianMatrix::new(k, d, data)
    }

    /// `∇_x log softmax(F(x))_class`, the input-space direction that raises
    /// the model's confidence in `class`.
    pub fn input_gradient(&self, x: &Tensor, class: usize) -> Result<Vec<f64>> {
        self.check_sample(x)?;
        let k = self.num_classes();
        if class >= k {
            return Err(Error::invalid(format!("class {class} out of range")));
        }
        let trace = self.trace(x.data(), 1);
        let p = softmax(trace.logits());
        let dz: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(j, pj)| if j == class { 1.0 - pj } else { -pj })
            .collect();
        let mut scratch = vec![0.0; self.num_params()];
        Ok(self
            .backprop(&trace, &dz, &mut scratch, true)
            .expect("input gradient requested"))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let shape_table = self
            .layers
            .iter()
            .zip(&self.plans)
            .enumerate()
            .filter(|(_, (_, p))| p.len > 0)
            .map(|(i, (l, p))| ParamShape {
                layer: i,
                offset: p.offset,
                weight: match l {
                    Layer::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                    } => vec![*out_channels, *in_channels, *kernel, *kernel],
                    Layer::Dense { inputs, outputs } => vec![*outputs, *inputs],
                    _ => unreachable!("only parametrized layers are listed"),
                },
                bias: vec![p.output[0]],
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch_id: self.arch_id.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            shape_table,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let model = Model::from_parts(ckpt.arch_id, ckpt.input_shape, ckpt.layers, ckpt.params)?;
        let expected = model.to_checkpoint().shape_table;
        if expected != ckpt.shape_table {
            return Err(Error::invalid("shape table does not match layers"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        Model::from_checkpoint(ckpt)
    }
}

const CHECKPOINT_FORMAT: &str = "mad-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub layer: usize,
    pub offset: usize,
    pub weight: Vec<usize>,
    pub bias: Vec<usize>,
}

/// Serialized model: architecture, parameter shape table, flat parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub arch_id: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub shape_table: Vec<ParamShape>,
    pub params: Vec<f64>,
}

fn plan(input_shape: &[usize], layers: &[Layer]) -> Result<Vec<Plan>> {
    if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("bad input shape {input_shape:?}")));
    }
    let mut shape = input_shape.to_vec();
    let mut offset = 0;
    let mut plans = Vec::with_capacity(layers.len());
    for l in layers {
        let output = l.output_shape(&shape)?;
        let len = l.param_count();
        plans.push(Plan {
            input: shape,
            output: output.clone(),
            offset,
            len,
        });
        offset += len;
        shape = output;
    }
    Ok(plans)
}
