use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::defense::{angular_deviation, DefensePolicy, GradientVector, Gram};
use crate::error::{Error, Result};
use crate::nn::{build, InputStats, Model};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 36;

/// Where the defender's Jacobian comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateMode {
    /// The attacker's current parameters.
    #[default]
    Whitebox,
    /// A fixed surrogate model.
    Blackbox,
}

fn default_steps() -> usize {
    500
}
fn default_lr() -> f64 {
    0.001
}
fn default_test_samples() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularConfig {
    #[serde(default)]
    pub mode: SurrogateMode,
    /// Online SGD steps, one query each.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Attacker architecture; the victim's when absent.
    #[serde(default)]
    pub attacker_arch: Option<String>,
    /// Test samples used for the loss trace.
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AngularConfig {
    fn default() -> Self {
        AngularConfig {
            mode: SurrogateMode::Whitebox,
            steps: default_steps(),
            lr: default_lr(),
            attacker_arch: None,
            test_samples: default_test_samples(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularHistogram {
    pub defense_tag: String,
    pub epsilon: f64,
    pub mode: SurrogateMode,
    /// `HISTOGRAM_BINS + 1` edges over [0°, 180°].
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean_theta: f64,
    pub deviations: Vec<f64>,
    /// Attacker test loss before training and after every step.
    pub test_loss_trace: Vec<f64>,
}

impl AngularHistogram {
    fn from_deviations(defense_tag: String, epsilon: f64, mode: SurrogateMode, deviations: Vec<f64>, trace: Vec<f64>) -> Self {
        let width = 180.0 / HISTOGRAM_BINS as f64;
        let bin_edges = (0..=HISTOGRAM_BINS).map(|i| i as f64 * width).collect();
        let mut counts = vec![0; HISTOGRAM_BINS];
        for &d in &deviations {
            counts[((d / width) as usize).min(HISTOGRAM_BINS - 1)] += 1;
        }
        let mean_theta = if deviations.is_empty() {
            0.0
        } else {
            deviations.iter().sum::<f64>() / deviations.len() as f64
        };
        AngularHistogram {
            defense_tag,
            epsilon,
            mode,
            bin_edges,
            counts,
            mean_theta,
            deviations,
            test_loss_trace: trace,
        }
    }
}

/// Trains an attacker by online SGD (batch 1) on the defended answers to
/// `queries`, recording at each step the angle between the parameter
/// gradients induced by the true and the perturbed posterior, and the
/// attacker's test loss against the true labels.
///
/// In whitebox mode the defense perturbs using the attacker's own current
/// Jacobian; in blackbox mode it uses `surrogate`.
pub fn run_angular_experiment(
    victim: &Model,
    queries: &Tensor,
    test: &LabeledDataset,
    policy: &DefensePolicy,
    surrogate: Option<&Model>,
    cfg: &AngularConfig,
) -> Result<AngularHistogram> {
    if !policy.kind.uses_epsilon() || !policy.kind.name().starts_with("mad") {
        return Err(Error::invalid(format!("angular experiment needs a MAD defense, got {}", policy.kind.name())));
    }
    policy.validate()?;
    if queries.batch_len() == 0 || cfg.steps == 0 {
        return Err(Error::invalid("need at least one query and one step"));
    }
    let surrogate = match cfg.mode {
        SurrogateMode::Whitebox => None,
        SurrogateMode::Blackbox => Some(surrogate.ok_or_else(|| Error::invalid("blackbox mode needs a surrogate"))?),
    };
    let arch = cfg.attacker_arch.as_deref().unwrap_or(victim.arch_id());
    let stats = InputStats::from_batch(queries);
    let mut attacker = build(arch, victim.input_shape(), victim.num_classes(), Some(&stats), cfg.seed)?;

    let n_test = cfg.test_samples.min(test.len()).max(1);
    let test_idx: Vec<usize> = (0..n_test).collect();
    let probe = test.subset(&test_idx, test.split);
    let probe_targets = probe.one_hot_targets();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..queries.batch_len()).collect();
    order.shuffle(&mut rng);

    let mut deviations = Vec::with_capacity(cfg.steps);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(attacker.loss(&probe.inputs, &probe_targets, 256)?);
    for step in 0..cfg.steps {
        let x = queries.sample_tensor(order[step % order.len()]);
        let y = victim.predict(&x)?;
        let g = attacker.loglik_jacobian(&x)?;
        let gram = match surrogate {
            None => Gram::from_jacobian(&g),
            Some(s) => Gram::from_jacobian(&s.loglik_jacobian(&x)?),
        };
        let y_tilde = policy.apply(&y, Some(&gram), &mut rng)?.posterior;
        let u = GradientVector(g.project(y.probs()));
        let a = GradientVector(g.project(y_tilde.probs()));
        match angular_deviation(&u, &a) {
            Ok(theta) => deviations.push(theta),
            Err(Error::UndefinedAngle) => {}
            Err(e) => return Err(e),
        }
        // `a` is the negative cross-entropy gradient for target ỹ.
        for (w, d) in attacker.params_mut().iter_mut().zip(a.values()) {
            *w += cfg.lr * d;
        }
        trace.push(attacker.loss(&probe.inputs, &probe_targets, 256)?);
    }
    Ok(AngularHistogram::from_deviations(
        policy.tag(),
        policy.epsilon.unwrap_or(0.0),
        cfg.mode,
        deviations,
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::nn::{sgd_train, TrainConfig};

    fn setup() -> (Model, LabeledDataset) {
        let data = synth_blobs(3, 40, 8, 0.1, 2).unwrap();
        let victim = sgd_train(
            build("mlp", &[8], 3, None, 0).unwrap(),
            &data,
            &TrainConfig {
                epochs: 5,
                batch_size: 8,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        (victim, data)
    }

    #[test]
    fn zero_budget_gives_zero_deviation_and_plain_training() {
        let (victim, data) = setup();
        let cfg = AngularConfig {
            steps: 50,
            lr: 0.01,
            ..AngularConfig::default()
        };
        let h = run_angular_experiment(&victim, &data.inputs, &data, &DefensePolicy::mad(0.0), None, &cfg).unwrap();
        assert_eq!(h.deviations.len(), 50);
        assert!(h.deviations.iter().all(|&d| d == 0.0));
        assert_eq!(h.counts[0], 50);
        assert_eq!(h.counts.iter().sum::<usize>(), 50);
        assert_eq!(h.bin_edges.len(), HISTOGRAM_BINS + 1);
        assert_eq!(h.test_loss_trace.len(), 51);
        assert!(h.test_loss_trace[50] < h.test_loss_trace[0]);
        let same = run_angular_experiment(&victim, &data.inputs, &data, &DefensePolicy::mad_argmax(0.0), None, &cfg).unwrap();
        assert_eq!(same.test_loss_trace, h.test_loss_trace);
    }

    #[test]
    fn large_budget_flips_gradients() {
        let (victim, data) = setup();
        let cfg = AngularConfig {
            steps: 100,
            lr: 0.01,
            ..AngularConfig::default()
        };
        let h = run_angular_experiment(&victim, &data.inputs, &data, &DefensePolicy::mad(2.0), None, &cfg).unwrap();
        assert!(h.mean_theta > 90.0, "{}", h.mean_theta);
        assert!(h.mean_theta <= 180.0);
    }

    #[test]
    fn rejects_non_mad_and_missing_surrogate() {
        let (victim, data) = setup();
        let cfg = AngularConfig::default();
        assert!(run_angular_experiment(&victim, &data.inputs, &data, &DefensePolicy::rand_noise(0.5), None, &cfg).is_err());
        let bb = AngularConfig {
            mode: SurrogateMode::Blackbox,
            ..cfg
        };
        assert!(run_angular_experiment(&victim, &data.inputs, &data, &DefensePolicy::mad(0.5), None, &bb).is_err());
    }
}
