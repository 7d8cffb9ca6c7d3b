//! Model-stealing attacks against a [`DefendedEndpoint`].
//!
//! [`DefendedEndpoint`]: crate::defense::DefendedEndpoint

mod jacobian;
mod knockoff;
mod query;

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

pub use jacobian::{augment_step, jacobian_round, run_jacobian_attack};
pub use knockoff::{knockoff_sample, run_knockoff, run_knockoff_prepared};
pub use query::{augment, collect_answers};

use crate::data::{LabeledDataset, QueryPool, TransferSet};
use crate::error::{Error, Result};
use crate::nn::{self, build, fit, InputStats, Model, Optimizer, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Random queries from an independent image pool.
    Knockoff,
    /// Seed set grown along the input gradient of the oracle's label.
    Jbda,
    /// Same, along the attacker's own top class.
    Jbself,
    /// Same, one copy for each of the attacker's top three classes.
    Jbtop3,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Knockoff => "knockoff",
            Strategy::Jbda => "jbda",
            Strategy::Jbself => "jbself",
            Strategy::Jbtop3 => "jbtop3",
        }
    }

    pub fn is_jacobian(self) -> bool {
        self != Strategy::Knockoff
    }
}

/// Ways the attacker may try to work around a perturbing defense.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Subversion {
    /// Train on one-hot argmax labels instead of the returned posteriors.
    ArgmaxOnly,
    /// Query every input `n` times and average the answers.
    Nquery { n: usize },
    /// Query `n` random crops/flips of every input and average the answers.
    NqueryAug { n: usize },
    /// Train with Adam (LR 1e-3) instead of momentum SGD.
    OptAdam,
}

/// Learning rate used by the `opt_adam` subversion.
pub const ADAM_LR: f64 = 1e-3;

fn default_seed_size() -> usize {
    100
}
fn default_lambda() -> f64 {
    0.1
}
fn default_rounds() -> usize {
    20
}
fn default_round_epochs() -> usize {
    5
}
fn default_input_range() -> (f64, f64) {
    (0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub strategy: Strategy,
    /// Total number of victim queries allowed.
    pub budget: usize,
    #[serde(default = "default_seed_size")]
    pub seed_size: usize,
    /// Step size of the Jacobian augmentation, in input units.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Upper bound on augmentation rounds.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Training epochs between augmentation rounds.
    #[serde(default = "default_round_epochs")]
    pub round_epochs: usize,
    /// Architecture of the stolen model; the victim's when absent.
    #[serde(default)]
    pub attacker_arch: Option<String>,
    /// Training hyperparameters; its `seed` also initializes the attacker.
    #[serde(default)]
    pub train_cfg: TrainConfig,
    #[serde(default)]
    pub subversions: Vec<Subversion>,
    /// Valid input range; synthesized inputs are clipped to it.
    #[serde(default = "default_input_range")]
    pub input_range: (f64, f64),
    /// Query selection seed (pool sample, augmentation draws).
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(strategy: Strategy, budget: usize) -> Self {
        AttackConfig {
            strategy,
            budget,
            seed_size: default_seed_size(),
            lambda: default_lambda(),
            rounds: default_rounds(),
            round_epochs: default_round_epochs(),
            attacker_arch: None,
            train_cfg: TrainConfig::default(),
            subversions: Vec::new(),
            input_range: default_input_range(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::invalid("attack budget must be positive"));
        }
        if self.strategy.is_jacobian() {
            if self.seed_size == 0 {
                return Err(Error::invalid("Jacobian attacks need seed_size ≥ 1"));
            }
            if self.budget < self.seed_size * self.queries_per_input() {
                return Err(Error::invalid(format!(
                    "budget {} cannot cover the seed set ({} inputs × {} queries)",
                    self.budget,
                    self.seed_size,
                    self.queries_per_input()
                )));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.input_range.0 < self.input_range.1) {
            return Err(Error::invalid("input_range must be increasing"));
        }
        let mut multi = 0;
        for s in &self.subversions {
            match s {
                Subversion::Nquery { n } | Subversion::NqueryAug { n } => {
                    if *n == 0 {
                        return Err(Error::invalid("nquery needs n ≥ 1"));
                    }
                    multi += 1;
                }
                _ => {}
            }
        }
        if multi > 1 {
            return Err(Error::invalid("use at most one of nquery / nquery_aug"));
        }
        self.train_cfg.validate()
    }

    /// Victim queries spent on each distinct input.
    pub fn queries_per_input(&self) -> usize {
        self.subversions
            .iter()
            .find_map(|s| match s {
                Subversion::Nquery { n } | Subversion::NqueryAug { n } => Some(*n),
                _ => None,
            })
            .unwrap_or(1)
    }

    pub fn has(&self, s: Subversion) -> bool {
        self.subversions.contains(&s)
    }

    /// Label such as `knockoff` or `jbtop3+argmax_only`.
    pub fn tag(&self) -> String {
        let mut tag = self.strategy.name().to_string();
        for s in &self.subversions {
            tag.push('+');
            match s {
                Subversion::ArgmaxOnly => tag.push_str("argmax_only"),
                Subversion::Nquery { n } => tag.push_str(&format!("nquery{n}")),
                Subversion::NqueryAug { n } => tag.push_str(&format!("nquery_aug{n}")),
                Subversion::OptAdam => tag.push_str("opt_adam"),
            }
        }
        tag
    }
}

/// Everything needed to reproduce a stolen model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub attack: AttackConfig,
    pub defense_tag: String,
    pub queries_used: usize,
    /// Distinct inputs in the transfer set.
    pub transfer_size: usize,
    #[serde(default)]
    pub sampled_with_replacement: bool,
    #[serde(default)]
    pub rounds_completed: usize,
}

#[derive(Clone, Debug)]
pub struct StolenModel {
    pub model: Model,
    pub provenance: Provenance,
}

/// Fraction of `test` the model labels correctly.
pub fn evaluate(model: &Model, test: &LabeledDataset) -> Result<f64> {
    nn::accuracy(model, test)
}

/// Training targets for a transfer set under the configured subversions.
pub fn training_targets(ts: &TransferSet, cfg: &AttackConfig) -> Vec<f64> {
    if !cfg.has(Subversion::ArgmaxOnly) {
        return ts.targets();
    }
    ts.records
        .iter()
        .flat_map(|r| {
            let k = r.posterior.num_classes();
            let mut t = vec![0.0; k];
            t[r.posterior.argmax()] = 1.0;
            t
        })
        .collect()
}

/// Trains a fresh attacker on a transfer set by cross-entropy against the
/// recorded (possibly perturbed) posteriors.
pub fn train_attacker(
    ts: &TransferSet,
    pool: Option<&QueryPool>,
    cfg: &AttackConfig,
    fallback_arch: &str,
) -> Result<StolenModel> {
    if ts.is_empty() {
        return Err(Error::invalid("transfer set is empty"));
    }
    cfg.validate()?;
    let inputs = ts.materialize(pool)?;
    let k = ts.records[0].posterior.num_classes();
    let arch = cfg.attacker_arch.as_deref().unwrap_or(fallback_arch);
    let stats = InputStats::from_batch(&inputs);
    let mut model = build(arch, &ts.input_shape, k, Some(&stats), cfg.train_cfg.seed)?;
    let (optimizer, train_cfg) = if cfg.has(Subversion::OptAdam) {
        (
            Optimizer::Adam,
            TrainConfig {
                lr: ADAM_LR,
                ..cfg.train_cfg.clone()
            },
        )
    } else {
        (Optimizer::Sgd, cfg.train_cfg.clone())
    };
    let targets = training_targets(ts, cfg);
    fit(&mut model, &inputs, &targets, &train_cfg, optimizer, |_, _| {
        ControlFlow::Continue(())
    })?;
    let provenance: Provenance = serde_json::from_value(ts.provenance.clone())
        .unwrap_or_else(|_| Provenance {
            attack: cfg.clone(),
            defense_tag: ts
                .records
                .first()
                .map(|r| r.defense_tag.clone())
                .unwrap_or_default(),
            queries_used: ts.len() * cfg.queries_per_input(),
            transfer_size: ts.len(),
            sampled_with_replacement: false,
            rounds_completed: 0,
        });
    Ok(StolenModel { model, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{InputRef, TransferRecord};
    use crate::simplex::Posterior;

    #[test]
    fn config_validation() {
        let mut c = AttackConfig::new(Strategy::Jbda, 50);
        assert!(c.validate().is_err());
        c.budget = 100;
        assert!(c.validate().is_ok());
        c.subversions = vec![Subversion::Nquery { n: 2 }];
        assert!(c.validate().is_err());
        c.budget = 200;
        assert!(c.validate().is_ok());
        c.subversions.push(Subversion::NqueryAug { n: 2 });
        assert!(c.validate().is_err());
        assert!(AttackConfig::new(Strategy::Knockoff, 0).validate().is_err());
    }

    #[test]
    fn config_json_defaults_and_tag() {
        let c: AttackConfig = serde_json::from_str(
            r#"{"strategy":"jbtop3","budget":1000,"subversions":[{"kind":"argmax_only"},{"kind":"nquery","n":3}]}"#,
        )
        .unwrap();
        assert_eq!(c.seed_size, 100);
        assert_eq!(c.lambda, 0.1);
        assert_eq!(c.queries_per_input(), 3);
        assert_eq!(c.tag(), "jbtop3+argmax_only+nquery3");
    }

    #[test]
    fn repeated_example_is_memorized() {
        let y = Posterior::new(vec![0.2, 0.7, 0.1]).unwrap();
        let mut ts = TransferSet::new(vec![4], None);
        for _ in 0..32 {
            ts.push(TransferRecord {
                input: InputRef::Inline {
                    data: vec![0.1, 0.9, 0.4, 0.6],
                },
                posterior: y.clone(),
                epsilon_used: 0.0,
                defense_tag: "none".into(),
                audit: None,
            });
        }
        let mut cfg = AttackConfig::new(Strategy::Knockoff, 32);
        cfg.train_cfg.epochs = 200;
        cfg.train_cfg.batch_size = 8;
        let stolen = train_attacker(&ts, None, &cfg, "mlp").unwrap();
        let x = crate::tensor::Tensor::new(vec![4], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        let p = stolen.model.predict(&x).unwrap();
        for (a, b) in p.probs().iter().zip(y.probs()) {
            assert!((a - b).abs() < 1e-3, "{:?}", p.probs());
        }
        assert_eq!(stolen.provenance.transfer_size, 32);

        cfg.subversions = vec![Subversion::ArgmaxOnly];
        let t = training_targets(&ts, &cfg);
        assert_eq!(&t[..3], &[0.0, 1.0, 0.0]);
    }
}
