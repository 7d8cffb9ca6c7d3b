//! Experiment orchestration: data and victim setup, ε sweeps, ablations,
//! angular-deviation runs, timing and result files.

mod angular;
mod emit;
mod sweep;
mod timing;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use angular::{run_angular_experiment, AngularConfig, AngularHistogram, SurrogateMode, HISTOGRAM_BINS};
pub use emit::{accuracy_svg, emit_results, histogram_svg, points_csv, ResultsDump, CSV_COLUMNS};
pub use sweep::{
    ablation_policies, defender_accuracy, derive_seed, expand_grid, run_ablation, run_sweep, OperatingPoint, Prepared,
    PointStatus,
};
pub use timing::{timing_report, TimingStats};

use crate::attack::AttackConfig;
use crate::data::{load_idx_images, load_mnist_idx, synth_blobs, LabeledDataset, QueryPool, Split};
use crate::defense::{DefensePolicy, SurrogateSpec};
use crate::error::{Error, Result};
use crate::nn::{self, build, sgd_train, InputStats, Model, TrainConfig};

/// Default ε grid for sweeps.
pub const DEFAULT_EPSILONS: &[f64] = &[0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 1.1, 1.5, 2.0];

/// Environment variable overriding [`ExperimentConfig::out_dir`].
pub const OUT_DIR_ENV: &str = "MAD_OUT_DIR";

fn default_train_images() -> String {
    "mnist-train-images.idx".into()
}
fn default_train_labels() -> String {
    "mnist-train-labels.idx".into()
}
fn default_test_images() -> String {
    "mnist-test-images.idx".into()
}
fn default_test_labels() -> String {
    "mnist-test-labels.idx".into()
}
fn default_pool_images() -> String {
    "fashion-images.idx".into()
}
fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// IDX files under `dir`. The query pool must come from a different
    /// distribution than the victim data.
    Idx {
        dir: PathBuf,
        #[serde(default = "default_train_images")]
        train_images: String,
        #[serde(default = "default_train_labels")]
        train_labels: String,
        #[serde(default = "default_test_images")]
        test_images: String,
        #[serde(default = "default_test_labels")]
        test_labels: String,
        #[serde(default = "default_pool_images")]
        pool_images: String,
        /// Keep only the first `n` pool images.
        #[serde(default)]
        pool_limit: Option<usize>,
    },
    /// Gaussian blobs reshaped to `shape`; the pool is a second blob set
    /// with different centers.
    Synthetic {
        classes: usize,
        per_class: usize,
        shape: Vec<usize>,
        spread: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn idx(dir: impl Into<PathBuf>) -> Self {
        DatasetSpec::Idx {
            dir: dir.into(),
            train_images: default_train_images(),
            train_labels: default_train_labels(),
            test_images: default_test_images(),
            test_labels: default_test_labels(),
            pool_images: default_pool_images(),
            pool_limit: None,
        }
    }

    fn files(&self) -> Vec<PathBuf> {
        match self {
            DatasetSpec::Idx {
                dir,
                train_images,
                train_labels,
                test_images,
                test_labels,
                pool_images,
                ..
            } => [train_images, train_labels, test_images, test_labels, pool_images]
                .iter()
                .map(|f| dir.join(f))
                .collect(),
            DatasetSpec::Synthetic { .. } => Vec::new(),
        }
    }
}

/// Victim training data, held-out test data, and the attacker's pools.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Independent natural inputs for knockoff.
    pub pool: QueryPool,
    /// Seed inputs for the Jacobian attacks (the test inputs).
    pub seed_pool: QueryPool,
}

impl ExperimentData {
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        match spec {
            DatasetSpec::Idx {
                dir,
                train_images,
                train_labels,
                test_images,
                test_labels,
                pool_images,
                pool_limit,
            } => {
                let train = load_mnist_idx(dir.join(train_images), dir.join(train_labels), Split::Train)?;
                let mut test = load_mnist_idx(dir.join(test_images), dir.join(test_labels), Split::Test)?;
                test.num_classes = test.num_classes.max(train.num_classes);
                let mut pool = load_idx_images(dir.join(pool_images))?;
                if let Some(n) = pool_limit {
                    if *n < pool.batch_len() {
                        let keep: Vec<usize> = (0..*n).collect();
                        pool = pool.select(&keep);
                    }
                }
                let seed_pool = QueryPool::new(test.inputs.clone(), format!("{}#test", dir.display()));
                Ok(ExperimentData {
                    pool: QueryPool::new(pool, pool_images.clone()),
                    seed_pool,
                    train,
                    test,
                })
            }
            DatasetSpec::Synthetic {
                classes,
                per_class,
                shape,
                spread,
                test_fraction,
                seed,
            } => {
                let dim: usize = shape.iter().product();
                let all = synth_blobs(*classes, *per_class, dim, *spread, *seed)?.reshape_samples(shape)?;
                let (train, test) = all.stratified_split(*test_fraction)?;
                let pool = synth_blobs(*classes, *per_class, dim, *spread, seed ^ 0x9e37_79b9_7f4a_7c15)?
                    .reshape_samples(shape)?;
                Ok(ExperimentData {
                    pool: QueryPool::new(pool.inputs, format!("blobs-pool-{seed}")),
                    seed_pool: QueryPool::new(test.inputs.clone(), format!("blobs-test-{seed}")),
                    train,
                    test,
                })
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        self.train.sample_shape()
    }
}

fn default_arch() -> String {
    "lenet".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimSpec {
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default)]
    pub train_cfg: TrainConfig,
    /// Loaded when the file exists, otherwise written after training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for VictimSpec {
    fn default() -> Self {
        VictimSpec {
            arch: default_arch(),
            train_cfg: TrainConfig::default(),
            checkpoint: None,
            seed: 0,
        }
    }
}

impl VictimSpec {
    /// Trains (or loads) the victim and reports its test accuracy.
    pub fn obtain(&self, data: &ExperimentData) -> Result<(Model, f64)> {
        let model = match &self.checkpoint {
            Some(p) if p.exists() => {
                let m = Model::load(p)?;
                if m.input_shape() != data.input_shape() || m.num_classes() != data.num_classes() {
                    return Err(Error::invalid(format!("checkpoint {} does not fit the dataset", p.display())));
                }
                m
            }
            _ => {
                let stats = InputStats::from_batch(&data.train.inputs);
                let init = build(&self.arch, data.input_shape(), data.num_classes(), Some(&stats), self.seed)?;
                let m = sgd_train(init, &data.train, &self.train_cfg)?;
                if let Some(p) = &self.checkpoint {
                    if let Some(parent) = p.parent() {
                        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                    }
                    m.save(p)?;
                }
                m
            }
        };
        let acc = nn::accuracy(&model, &data.test)?;
        Ok((model, acc))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub victim: VictimSpec,
    /// Defender's surrogate for MAD; a randomly initialized copy of the
    /// victim architecture when absent.
    #[serde(default)]
    pub surrogate: Option<SurrogateSpec>,
    pub defenses: Vec<DefensePolicy>,
    /// When set, every ε-parameterized defense is evaluated at each value.
    #[serde(default)]
    pub epsilons: Option<Vec<f64>>,
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Test samples used for defender accuracy (all when absent).
    #[serde(default)]
    pub defender_eval_limit: Option<usize>,
    #[serde(default)]
    pub angular: Option<AngularConfig>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.defenses.is_empty() {
            return Err(Error::invalid("defense grid is empty"));
        }
        if self.attacks.is_empty() {
            return Err(Error::invalid("attack grid is empty"));
        }
        for d in &self.defenses {
            let mut d = d.clone();
            if d.kind.uses_epsilon() && self.epsilons.is_some() {
                d.epsilon.get_or_insert(0.0);
            }
            d.validate()?;
        }
        if let Some(eps) = &self.epsilons {
            if eps.is_empty() || eps.iter().any(|e| !(0.0..=2.0).contains(e)) {
                return Err(Error::invalid("epsilons must be a non-empty list within [0, 2]"));
            }
        }
        for a in &self.attacks {
            a.validate()?;
        }
        self.victim.train_cfg.validate()?;
        for f in self.dataset.files() {
            if !f.exists() {
                return Err(Error::invalid(format!("missing data file {}", f.display())));
            }
        }
        Ok(())
    }

    /// `MAD_OUT_DIR` if set, else `out_dir`, else `./results`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("results"))
    }

    pub fn resolved_threads(&self) -> usize {
        self.threads.unwrap_or_else(crate::default_threads).max(1)
    }

    pub fn surrogate_spec(&self) -> SurrogateSpec {
        self.surrogate
            .clone()
            .unwrap_or_else(|| SurrogateSpec::random(self.victim.arch.clone(), derive_seed(self.seed, "surrogate")))
    }
}

/// Victim model, its clean test accuracy, and the defender's surrogate.
#[derive(Clone, Debug)]
pub struct Setup {
    pub data: ExperimentData,
    pub victim: Arc<Model>,
    pub victim_accuracy: f64,
    pub surrogate: Arc<Model>,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let data = ExperimentData::load(&cfg.dataset)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: &ExperimentConfig, data: ExperimentData) -> Result<Self> {
        let (victim, victim_accuracy) = cfg.victim.obtain(&data)?;
        let stats = InputStats::from_batch(&data.train.inputs);
        let surrogate = cfg.surrogate_spec().build(
            data.input_shape(),
            data.num_classes(),
            Some(&stats),
            Some((&data.train, &data.test)),
            &cfg.victim.train_cfg,
        )?;
        Ok(Setup {
            data,
            victim: Arc::new(victim),
            victim_accuracy,
            surrogate: Arc::new(surrogate),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Strategy;

    pub(crate) fn synthetic_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                classes: 3,
                per_class: 60,
                shape: vec![6],
                spread: 0.08,
                test_fraction: 0.25,
                seed: 1,
            },
            victim: VictimSpec {
                arch: "mlp".into(),
                train_cfg: TrainConfig {
                    epochs: 8,
                    batch_size: 16,
                    ..TrainConfig::default()
                },
                checkpoint: None,
                seed: 0,
            },
            surrogate: None,
            defenses: vec![DefensePolicy::none(), DefensePolicy::mad(0.0)],
            epsilons: None,
            attacks: vec![{
                let mut a = AttackConfig::new(Strategy::Knockoff, 60);
                a.train_cfg.epochs = 5;
                a.train_cfg.batch_size = 16;
                a
            }],
            out_dir: None,
            seed: 3,
            threads: Some(1),
            defender_eval_limit: None,
            angular: None,
        }
    }

    #[test]
    fn config_validation() {
        let cfg = synthetic_config();
        assert!(cfg.validate().is_ok());
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let mut bad = cfg.clone();
        bad.defenses.clear();
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.dataset = DatasetSpec::idx("/nonexistent");
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.epsilons = Some(vec![2.5]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn synthetic_pool_is_independent_of_victim_data() {
        let data = ExperimentData::load(&synthetic_config().dataset).unwrap();
        assert_eq!(data.input_shape(), &[6]);
        assert_eq!(data.train.len() + data.test.len(), 180);
        assert_ne!(data.pool.inputs.sample(0), data.train.inputs.sample(0));
        assert_eq!(data.seed_pool.len(), data.test.len());
    }

    #[test]
    fn victim_checkpoint_is_reused() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = synthetic_config();
        cfg.victim.checkpoint = Some(dir.path().join("v/victim.json"));
        let data = ExperimentData::load(&cfg.dataset).unwrap();
        let (a, acc) = cfg.victim.obtain(&data).unwrap();
        assert!(acc > 0.9);
        cfg.victim.train_cfg.epochs = 1;
        let (b, _) = cfg.victim.obtain(&data).unwrap();
        assert_eq!(a.params(), b.params());
    }
}
