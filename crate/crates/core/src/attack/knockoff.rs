use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::query::average_groups;
use super::{collect_answers, AttackConfig, Provenance, Subversion};
use crate::data::{sample_queries, Audit, InputRef, QueryPool, QuerySample, TransferRecord, TransferSet};
use crate::defense::{DefendedEndpoint, PreparedQuery};
use crate::error::{Error, Result};
use crate::simplex::Posterior;

/// Queries `budget / n` pool images (n = queries per input) chosen
/// uniformly at random, distinct when the pool is large enough.
pub fn run_knockoff(endpoint: &DefendedEndpoint, pool: &QueryPool, cfg: &AttackConfig) -> Result<TransferSet> {
    cfg.validate()?;
    let sample = knockoff_sample(pool, cfg)?;
    let xs = pool.inputs.select(&sample.indices);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let before = endpoint.queries_issued();
    let answers = collect_answers(endpoint, &xs, cfg, &mut rng)?;
    finish(endpoint, pool, cfg, &sample, answers, before)
}

/// The pool rows a knockoff attack with `cfg` will query, in order.
pub fn knockoff_sample(pool: &QueryPool, cfg: &AttackConfig) -> Result<QuerySample> {
    let distinct = cfg.budget / cfg.queries_per_input();
    if distinct == 0 {
        return Err(Error::invalid("budget smaller than the queries per input"));
    }
    sample_queries(pool, distinct, cfg.seed)
}

/// Same result as [`run_knockoff`] for queries whose victim posteriors and
/// Gram matrices were computed up front (one per row of
/// [`knockoff_sample`]). Not available with `nquery_aug`, whose inputs are
/// random.
pub fn run_knockoff_prepared(
    endpoint: &DefendedEndpoint,
    pool: &QueryPool,
    cfg: &AttackConfig,
    prepared: &[PreparedQuery],
) -> Result<TransferSet> {
    cfg.validate()?;
    if cfg.subversions.iter().any(|s| matches!(s, Subversion::NqueryAug { .. })) {
        return Err(Error::invalid("nquery_aug queries cannot be prepared in advance"));
    }
    let sample = knockoff_sample(pool, cfg)?;
    if prepared.len() != sample.indices.len() {
        return Err(Error::LengthMismatch {
            left: sample.indices.len(),
            right: prepared.len(),
        });
    }
    let n = cfg.queries_per_input();
    let before = endpoint.queries_issued();
    let expanded: Vec<PreparedQuery> = prepared
        .iter()
        .flat_map(|q| std::iter::repeat(q).take(n).cloned())
        .collect();
    let answers = average_groups(endpoint.answer_prepared(&expanded)?, n)?;
    finish(endpoint, pool, cfg, &sample, answers, before)
}

fn finish(
    endpoint: &DefendedEndpoint,
    pool: &QueryPool,
    cfg: &AttackConfig,
    sample: &QuerySample,
    answers: Vec<(Posterior, Audit)>,
    before: usize,
) -> Result<TransferSet> {
    let mut ts = TransferSet::new(pool.inputs.sample_shape().to_vec(), Some(pool));
    let policy = endpoint.policy();
    let eps = policy.epsilon.unwrap_or(0.0);
    for (&index, (posterior, audit)) in sample.indices.iter().zip(answers) {
        ts.push(TransferRecord {
            input: InputRef::Pool { index },
            posterior,
            epsilon_used: eps,
            defense_tag: policy.tag(),
            audit: Some(audit),
        });
    }
    ts.provenance = serde_json::to_value(Provenance {
        attack: cfg.clone(),
        defense_tag: policy.tag(),
        queries_used: endpoint.queries_issued() - before,
        transfer_size: ts.len(),
        sampled_with_replacement: sample.with_replacement,
        rounds_completed: 0,
    })?;
    Ok(ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::{prepare_queries, DefensePolicy, SurrogateSpec};
    use crate::nn::{build, TrainConfig};
    use crate::tensor::Tensor;
    use std::sync::Arc;

    fn pool(n: usize) -> QueryPool {
        let data = (0..n * 4).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        QueryPool::new(Tensor::new(vec![n, 4], data).unwrap(), "grid")
    }

    fn endpoint(policy: DefensePolicy) -> DefendedEndpoint {
        let victim = Arc::new(build("mlp", &[4], 3, None, 1).unwrap());
        let s = SurrogateSpec::random("mlp", 2).build(&[4], 3, None, None, &TrainConfig::default()).unwrap();
        DefendedEndpoint::new(victim, policy, Some(Arc::new(s)), 5).unwrap()
    }

    #[test]
    fn records_match_budget_and_fall_back_to_replacement() {
        let p = pool(30);
        let ep = endpoint(DefensePolicy::none());
        let ts = run_knockoff(&ep, &p, &AttackConfig::new(crate::attack::Strategy::Knockoff, 20)).unwrap();
        assert_eq!(ts.len(), 20);
        let prov: Provenance = serde_json::from_value(ts.provenance.clone()).unwrap();
        assert!(!prov.sampled_with_replacement);
        let ts = run_knockoff(&ep, &p, &AttackConfig::new(crate::attack::Strategy::Knockoff, 45)).unwrap();
        assert_eq!(ts.len(), 45);
        let prov: Provenance = serde_json::from_value(ts.provenance.clone()).unwrap();
        assert!(prov.sampled_with_replacement);
        assert_eq!(ep.queries_issued(), 65);
    }

    #[test]
    fn prepared_path_matches_live_queries() {
        let p = pool(40);
        let mut cfg = AttackConfig::new(crate::attack::Strategy::Knockoff, 30);
        cfg.subversions = vec![Subversion::Nquery { n: 3 }];
        let live = run_knockoff(&endpoint(DefensePolicy::mad(0.4)), &p, &cfg).unwrap();
        let ep = endpoint(DefensePolicy::mad(0.4));
        let xs = p.inputs.select(&knockoff_sample(&p, &cfg).unwrap().indices);
        let prep = prepare_queries(ep.victim(), ep.surrogate(), &xs, 1).unwrap();
        let fast = run_knockoff_prepared(&ep, &p, &cfg, &prep).unwrap();
        assert_eq!(live, fast);
        assert_eq!(fast.len(), 10);
    }
}
