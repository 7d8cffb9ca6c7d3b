use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mini-batch training hyperparameters.
///
/// Defaults: SGD with LR 0.1 and momentum 0.5 for 30 epochs, LR multiplied
/// by 0.1 every 50 epochs, batches of 64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.5,
            epochs: 30,
            lr_decay: 0.1,
            lr_decay_every: 50,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 {
            return Err(Error::invalid("lr_decay_every and batch_size must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball momentum: `v ← μv + g`, `w ← w − lr·v`.
    #[default]
    Sgd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8, using the config's LR.
    Adam,
}

/// Progress notification passed to the [`fit`] callback.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Progress {
    /// After the parameter update for mini-batch `step` (counted from the
    /// start of training).
    Batch { epoch: usize, step: usize },
    Epoch { epoch: usize, mean_loss: f64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean mini-batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

enum State {
    Sgd { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl State {
    fn new(opt: Optimizer, d: usize) -> Self {
        match opt {
            Optimizer::Sgd => State::Sgd {
                velocity: vec![0.0; d],
            },
            Optimizer::Adam => State::Adam {
                m: vec![0.0; d],
                v: vec![0.0; d],
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
        match self {
            State::Sgd { velocity } => {
                for ((w, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
                    *v = momentum * *v + g;
                    *w -= lr * *v;
                }
            }
            State::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for (((w, m), v), g) in params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

/// Trains `model` in place on soft targets (row-major `n × K`).
///
/// `on_progress` runs after every mini-batch and every epoch and may stop
/// training early.
pub fn fit<F>(
    model: &mut Model,
    inputs: &Tensor,
    targets: &[f64],
    cfg: &TrainConfig,
    optimizer: Optimizer,
    mut on_progress: F,
) -> Result<TrainReport>
where
    F: FnMut(Progress, &Model) -> ControlFlow<()>,
{
    cfg.validate()?;
    let n = inputs.batch_len();
    if n == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    let k = model.num_classes();
    if targets.len() != n * k {
        return Err(Error::LengthMismatch {
            left: n * k,
            right: targets.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut state = State::new(optimizer, model.num_params());
    let mut report = TrainReport::default();
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs = inputs.select(batch);
            let ts: Vec<f64> = batch
                .iter()
                .flat_map(|&i| targets[i * k..(i + 1) * k].iter().copied())
                .collect();
            let (loss, grad) = model.loss_and_grad(&xs, &ts)?;
            total += loss * batch.len() as f64;
            state.step(model.params_mut(), &grad, lr, cfg.momentum);
            if on_progress(Progress::Batch { epoch, step }, model).is_break() {
                break 'outer;
            }
            step += 1;
        }
        let mean_loss = total / n as f64;
        report.epoch_losses.push(mean_loss);
        if on_progress(Progress::Epoch { epoch, mean_loss }, model).is_break() {
            break;
        }
    }
    if model.params().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training diverged (non-finite parameters)"));
    }
    Ok(report)
}

/// Trains on hard labels with momentum SGD.
pub fn sgd_train(mut model: Model, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Model> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let targets = data.one_hot_targets();
    fit(
        &mut model,
        &data.inputs,
        &targets,
        cfg,
        Optimizer::Sgd,
        |_, _| ControlFlow::Continue(()),
    )?;
    Ok(model)
}
