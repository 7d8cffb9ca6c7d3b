use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Setup, DEFAULT_EPSILONS};
use crate::attack::{
    evaluate, knockoff_sample, run_jacobian_attack, run_knockoff, run_knockoff_prepared, train_attacker, AttackConfig,
    Strategy, Subversion,
};
use crate::data::TransferSet;
use crate::defense::{prepare_queries, DefendedEndpoint, DefenseKind, DefensePolicy, PreparedQuery};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::simplex::{entropy, LogBase};

/// Stable seed for a named sub-task of an experiment (FNV-1a of the label,
/// mixed with the global seed by SplitMix64).
pub fn derive_seed(global: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = global ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Ok,
    Failed(String),
}

impl PointStatus {
    pub fn label(&self) -> String {
        match self {
            PointStatus::Ok => "ok".into(),
            PointStatus::Failed(m) => format!("failed: {m}"),
        }
    }
}

/// One (defense, attack) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub defense_tag: String,
    pub defense_kind: DefenseKind,
    pub epsilon: Option<f64>,
    pub attack_tag: String,
    pub attack_seed: u64,
    pub train_seed: u64,
    /// Test accuracy of the argmax of the defended answers.
    pub acc_defender: f64,
    /// Test accuracy of the stolen model.
    pub acc_attacker: f64,
    /// Mean L1 distance of the attacker's answers from the victim posteriors.
    pub mean_l1: f64,
    /// Mean entropy (bits) of the attacker's answers.
    pub mean_entropy: f64,
    pub queries_used: usize,
    pub wallclock_ms_per_query: f64,
    pub status: PointStatus,
}

/// Every ε-parameterized policy once per value of `epsilons`; the others
/// unchanged. Duplicate tags are dropped.
pub fn expand_grid(defenses: &[DefensePolicy], epsilons: Option<&[f64]>) -> Vec<DefensePolicy> {
    let mut out: Vec<DefensePolicy> = Vec::new();
    for d in defenses {
        let variants: Vec<DefensePolicy> = match epsilons {
            Some(eps) if d.kind.uses_epsilon() => eps
                .iter()
                .map(|&e| DefensePolicy {
                    epsilon: Some(e),
                    ..d.clone()
                })
                .collect(),
            _ => vec![d.clone()],
        };
        for v in variants {
            if !out.iter().any(|o| o.tag() == v.tag()) {
                out.push(v);
            }
        }
    }
    out
}

/// MAD, MAD-argmax and the two ablations over the config's ε grid.
pub fn ablation_policies(cfg: &ExperimentConfig) -> Vec<DefensePolicy> {
    let eps = cfg.epsilons.as_deref().unwrap_or(DEFAULT_EPSILONS);
    let kinds = [
        DefenseKind::Mad,
        DefenseKind::MadArgmax,
        DefenseKind::MadIdentityG,
        DefenseKind::MadRandYStar,
    ];
    let base: Vec<DefensePolicy> = kinds.iter().map(|&k| DefensePolicy::with_epsilon(k, 0.0)).collect();
    expand_grid(&base, Some(eps))
}

/// Victim posteriors and surrogate Grams of the test set, shared by all
/// policies of a sweep.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub queries: Vec<PreparedQuery>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn test_set(setup: &Setup, limit: Option<usize>, with_gram: bool, threads: usize) -> Result<Self> {
        let n = limit.unwrap_or(usize::MAX).min(setup.data.test.len());
        let idx: Vec<usize> = (0..n).collect();
        let xs = setup.data.test.inputs.select(&idx);
        let surrogate = with_gram.then(|| setup.surrogate.as_ref());
        Ok(Prepared {
            queries: prepare_queries(&setup.victim, surrogate, &xs, threads)?,
            labels: setup.data.test.labels[..n].to_vec(),
        })
    }
}

/// Accuracy of the argmax of `policy`'s answers on prepared test queries.
pub fn defender_accuracy(
    victim: &Arc<Model>,
    surrogate: &Arc<Model>,
    policy: &DefensePolicy,
    test: &Prepared,
    seed: u64,
    threads: usize,
) -> Result<f64> {
    if test.queries.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let ep = DefendedEndpoint::new(victim.clone(), policy.clone(), Some(surrogate.clone()), seed)?.with_threads(threads);
    let answers = ep.answer_prepared(&test.queries)?;
    let correct = answers
        .iter()
        .zip(&test.labels)
        .filter(|(a, &l)| a.posterior.argmax() == l)
        .count();
    Ok(correct as f64 / test.labels.len() as f64)
}

fn policy_epsilon(p: &DefensePolicy) -> Option<f64> {
    if p.kind.uses_epsilon() {
        p.epsilon
    } else {
        None
    }
}

/// Knockoff queries that do not depend on the defense, prepared once.
struct KnockoffCache {
    prepared: Vec<PreparedQuery>,
    prep_ms: f64,
}

fn transfer_stats(ts: &TransferSet) -> (f64, f64) {
    let n = ts.len().max(1) as f64;
    let l1 = ts.records.iter().filter_map(|r| r.audit.as_ref()).map(|a| a.l1).sum::<f64>() / n;
    let h = ts.records.iter().map(|r| entropy(&r.posterior, LogBase::Two)).sum::<f64>() / n;
    (l1, h)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    setup: &'a Setup,
    threads: usize,
}

impl Ctx<'_> {
    fn attack_point(
        &self,
        policy: &DefensePolicy,
        attack: &AttackConfig,
        cache: Option<&KnockoffCache>,
    ) -> Result<(f64, f64, f64, usize, f64)> {
        let setup = self.setup;
        let seed = derive_seed(self.cfg.seed, &format!("endpoint/{}/{}/{}/{}", attack.tag(), attack.seed, attack.train_cfg.seed, policy.tag()));
        let ep = DefendedEndpoint::new(setup.victim.clone(), policy.clone(), Some(setup.surrogate.clone()), seed)?
            .with_query_limit(attack.budget)
            .with_threads(self.threads);
        let arch = setup.victim.arch_id();
        let start = Instant::now();
        let (ts, pool) = match (attack.strategy, cache) {
            (Strategy::Knockoff, Some(c)) => (run_knockoff_prepared(&ep, &setup.data.pool, attack, &c.prepared)?, &setup.data.pool),
            (Strategy::Knockoff, None) => (run_knockoff(&ep, &setup.data.pool, attack)?, &setup.data.pool),
            _ => (
                run_jacobian_attack(&ep, &setup.data.seed_pool, attack, arch, self.threads)?,
                &setup.data.seed_pool,
            ),
        };
        let mut ms = start.elapsed().as_secs_f64() * 1e3;
        if let Some(c) = cache {
            ms += c.prep_ms;
        }
        let queries = ep.queries_issued();
        let stolen = train_attacker(&ts, Some(pool), attack, arch)?;
        let acc = evaluate(&stolen.model, &setup.data.test)?;
        let (l1, h) = transfer_stats(&ts);
        Ok((acc, l1, h, queries, ms / queries.max(1) as f64))
    }

    fn knockoff_cache(&self, attack: &AttackConfig, with_gram: bool) -> Result<Option<KnockoffCache>> {
        if attack.strategy != Strategy::Knockoff
            || attack.subversions.iter().any(|s| matches!(s, Subversion::NqueryAug { .. }))
        {
            return Ok(None);
        }
        let start = Instant::now();
        let sample = knockoff_sample(&self.setup.data.pool, attack)?;
        let xs = self.setup.data.pool.inputs.select(&sample.indices);
        let surrogate = with_gram.then(|| self.setup.surrogate.as_ref());
        let prepared = prepare_queries(&self.setup.victim, surrogate, &xs, self.threads)?;
        Ok(Some(KnockoffCache {
            prepared,
            prep_ms: start.elapsed().as_secs_f64() * 1e3,
        }))
    }
}

fn persist_partial(dir: &Path, points: &[OperatingPoint]) {
    if std::fs::create_dir_all(dir).is_ok() {
        if let Ok(s) = serde_json::to_string_pretty(points) {
            let _ = std::fs::write(dir.join("points.partial.json"), s);
        }
    }
}

fn sort_points(points: &mut [OperatingPoint]) {
    points.sort_by(|a, b| {
        a.attack_tag
            .cmp(&b.attack_tag)
            .then(a.attack_seed.cmp(&b.attack_seed))
            .then(a.train_seed.cmp(&b.train_seed))
            .then(a.defense_kind.name().cmp(b.defense_kind.name()))
            .then(a.epsilon.unwrap_or(-1.0).total_cmp(&b.epsilon.unwrap_or(-1.0)))
            .then(a.defense_tag.cmp(&b.defense_tag))
    });
}

fn sweep_policies(cfg: &ExperimentConfig, setup: &Setup, policies: &[DefensePolicy]) -> Result<Vec<OperatingPoint>> {
    let threads = cfg.resolved_threads();
    let ctx = Ctx { cfg, setup, threads };
    let with_gram = policies.iter().any(|p| p.kind.needs_jacobian());
    let partial_dir = (cfg.out_dir.is_some() || std::env::var_os(super::OUT_DIR_ENV).is_some())
        .then(|| cfg.resolved_out_dir());
    let test = Prepared::test_set(setup, cfg.defender_eval_limit, with_gram, threads)?;
    let mut acc_def = Vec::with_capacity(policies.len());
    for p in policies {
        acc_def.push(defender_accuracy(
            &setup.victim,
            &setup.surrogate,
            p,
            &test,
            derive_seed(cfg.seed, &format!("defender/{}", p.tag())),
            threads,
        ));
    }
    let mut points = Vec::new();
    for attack in &cfg.attacks {
        let cache = ctx.knockoff_cache(attack, with_gram);
        for (p, acc_d) in policies.iter().zip(&acc_def) {
            let result = match (&cache, acc_d) {
                (Err(e), _) | (_, Err(e)) => Err(Error::invalid(e.to_string())),
                (Ok(c), Ok(_)) => ctx.attack_point(p, attack, c.as_ref()),
            };
            let mut point = OperatingPoint {
                defense_tag: p.tag(),
                defense_kind: p.kind,
                epsilon: policy_epsilon(p),
                attack_tag: attack.tag(),
                attack_seed: attack.seed,
                train_seed: attack.train_cfg.seed,
                acc_defender: *acc_d.as_ref().unwrap_or(&0.0),
                acc_attacker: 0.0,
                mean_l1: 0.0,
                mean_entropy: 0.0,
                queries_used: 0,
                wallclock_ms_per_query: 0.0,
                status: PointStatus::Ok,
            };
            match result {
                Ok((acc, l1, h, q, ms)) => {
                    point.acc_attacker = acc;
                    point.mean_l1 = l1;
                    point.mean_entropy = h;
                    point.queries_used = q;
                    point.wallclock_ms_per_query = ms;
                }
                Err(e) => point.status = PointStatus::Failed(e.to_string()),
            }
            points.push(point);
            if let Some(dir) = &partial_dir {
                persist_partial(dir, &points);
            }
        }
    }
    sort_points(&mut points);
    Ok(points)
}

/// One operating point per (defense, ε, attack). A failing point is kept
/// with a `failed` status instead of aborting the sweep.
pub fn run_sweep(cfg: &ExperimentConfig, setup: &Setup) -> Result<Vec<OperatingPoint>> {
    let policies = expand_grid(&cfg.defenses, cfg.epsilons.as_deref());
    sweep_policies(cfg, setup, &policies)
}

/// [`run_sweep`] over MAD, MAD-argmax, identity-G and random-y* policies.
pub fn run_ablation(cfg: &ExperimentConfig, setup: &Setup) -> Result<Vec<OperatingPoint>> {
    sweep_policies(cfg, setup, &ablation_policies(cfg))
}

#[cfg(test)]
mod tests {
    use super::super::tests::synthetic_config;
    use super::*;

    #[test]
    fn grid_expansion() {
        let g = expand_grid(
            &[DefensePolicy::none(), DefensePolicy::mad(0.3), DefensePolicy::reverse_sigmoid(0.5, 0.2)],
            Some(&[0.0, 0.5]),
        );
        let tags: Vec<String> = g.iter().map(|p| p.tag()).collect();
        assert_eq!(tags, ["none", "mad(eps=0)", "mad(eps=0.5)", "reverse_sigmoid(beta=0.5,gamma=0.2)"]);
        assert_eq!(ablation_policies(&synthetic_config()).len(), 4 * DEFAULT_EPSILONS.len());
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }

    #[test]
    fn identity_points_and_zero_budget() {
        let cfg = synthetic_config();
        let setup = Setup::new(&cfg).unwrap();
        let points = run_sweep(&cfg, &setup).unwrap();
        assert_eq!(points.len(), 2);
        let none = points.iter().find(|p| p.defense_kind == DefenseKind::None).unwrap();
        let mad0 = points.iter().find(|p| p.defense_kind == DefenseKind::Mad).unwrap();
        assert_eq!(none.status, PointStatus::Ok);
        assert_eq!(none.acc_defender, setup.victim_accuracy);
        assert_eq!(none.mean_l1, 0.0);
        assert_eq!(none.queries_used, 60);
        assert_eq!(mad0.acc_defender, none.acc_defender);
        assert_eq!(mad0.acc_attacker, none.acc_attacker);
        assert_eq!(mad0.mean_entropy, none.mean_entropy);
    }

    #[test]
    fn failures_are_marked_not_fatal() {
        let mut cfg = synthetic_config();
        let mut bad = AttackConfig::new(Strategy::Jbda, 5);
        bad.seed_size = 5;
        bad.attacker_arch = Some("lenet".into());
        cfg.attacks.push(bad);
        cfg.defenses = vec![DefensePolicy::none()];
        let setup = Setup::new(&cfg).unwrap();
        let points = run_sweep(&cfg, &setup).unwrap();
        assert_eq!(points.len(), 2);
        assert!(points.iter().any(|p| matches!(p.status, PointStatus::Failed(_))));
        assert!(points.iter().any(|p| p.status == PointStatus::Ok));
    }
}
