use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, build, fit, InputStats, JacobianMatrix, Model, Optimizer, Progress, TrainConfig};
use crate::tensor::Tensor;

/// How far the defender's surrogate is trained before it is frozen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Randomly initialized, never trained.
    #[default]
    Rand,
    /// First checkpoint reaching 25% test accuracy.
    Early,
    /// First checkpoint reaching 50% test accuracy.
    Mid,
    /// First checkpoint reaching 75% test accuracy.
    Late,
}

impl InitMode {
    pub fn target_accuracy(self) -> Option<f64> {
        match self {
            InitMode::Rand => None,
            InitMode::Early => Some(0.25),
            InitMode::Mid => Some(0.5),
            InitMode::Late => Some(0.75),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub arch_id: String,
    #[serde(default)]
    pub init_mode: InitMode,
    #[serde(default)]
    pub seed: u64,
}

/// Mini-batches between accuracy checks while looking for a checkpoint.
const CHECK_EVERY: usize = 5;
/// Test samples used for those checks.
const CHECK_SAMPLES: usize = 1000;

impl SurrogateSpec {
    pub fn random(arch_id: impl Into<String>, seed: u64) -> Self {
        SurrogateSpec {
            arch_id: arch_id.into(),
            init_mode: InitMode::Rand,
            seed,
        }
    }

    /// Builds the frozen surrogate.
    ///
    /// Trained modes need `(train, test)` data; training follows `cfg` and
    /// stops at the first check whose test accuracy reaches the mode's band.
    pub fn build(
        &self,
        input_shape: &[usize],
        num_classes: usize,
        stats: Option<&InputStats>,
        data: Option<(&LabeledDataset, &LabeledDataset)>,
        cfg: &TrainConfig,
    ) -> Result<Model> {
        let mut model = build(&self.arch_id, input_shape, num_classes, stats, self.seed)?;
        let Some(target) = self.init_mode.target_accuracy() else {
            return Ok(model);
        };
        let (train, test) = data.ok_or_else(|| {
            Error::invalid(format!("surrogate init mode {:?} needs training data", self.init_mode))
        })?;
        let probe: Vec<usize> = (0..test.len().min(CHECK_SAMPLES)).collect();
        let probe = test.subset(&probe, test.split);
        let mut reached = nn::accuracy(&model, &probe)? >= target;
        if reached {
            return Ok(model);
        }
        let cfg = TrainConfig {
            seed: self.seed,
            ..cfg.clone()
        };
        fit(
            &mut model,
            &train.inputs,
            &train.one_hot_targets(),
            &cfg,
            Optimizer::Sgd,
            |p, m| match p {
                Progress::Batch { step, .. } if (step + 1) % CHECK_EVERY == 0 => {
                    reached = nn::accuracy(m, &probe).is_ok_and(|a| a >= target);
                    if reached {
                        ControlFlow::Break(())
                    } else {
                        ControlFlow::Continue(())
                    }
                }
                _ => ControlFlow::Continue(()),
            },
        )?;
        if !reached {
            return Err(Error::invalid(format!(
                "surrogate never reached {:.0}% test accuracy",
                target * 100.0
            )));
        }
        Ok(model)
    }
}

/// Jacobian of the surrogate's log-likelihoods at `x`. The surrogate is
/// only read.
pub fn estimate_g(surrogate: &Model, x: &Tensor) -> Result<JacobianMatrix> {
    surrogate.loglik_jacobian(x)
}
