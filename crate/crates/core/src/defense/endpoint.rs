use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DefensePolicy, Gram};
use crate::data::Audit;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::par::map_indexed;
use crate::simplex::{lp_dist, Norm, Posterior};
use crate::tensor::Tensor;

/// Victim posterior of one query plus, when a surrogate is given, the Gram
/// matrix of the surrogate's log-likelihood Jacobian at the same input.
///
/// Neither depends on the budget, so one preparation serves every `ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedQuery {
    pub y: Posterior,
    pub gram: Option<Gram>,
}

const PREDICT_CHUNK: usize = 256;

pub fn prepare_queries(
    victim: &Model,
    surrogate: Option<&Model>,
    xs: &Tensor,
    threads: usize,
) -> Result<Vec<PreparedQuery>> {
    let ys = victim.predict_batch(xs, PREDICT_CHUNK)?;
    let Some(s) = surrogate else {
        return Ok(ys.into_iter().map(|y| PreparedQuery { y, gram: None }).collect());
    };
    if s.num_classes() != victim.num_classes() {
        return Err(Error::LengthMismatch {
            left: victim.num_classes(),
            right: s.num_classes(),
        });
    }
    let grams = map_indexed(xs.batch_len(), threads, |i| {
        Ok(Gram::from_jacobian(&s.loglik_jacobian(&xs.sample_tensor(i))?))
    })?;
    Ok(ys
        .into_iter()
        .zip(grams)
        .map(|(y, g)| PreparedQuery { y, gram: Some(g) })
        .collect())
}

/// One defended answer and its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Answer {
    pub posterior: Posterior,
    pub audit: Audit,
}

/// A victim model behind a defense policy.
///
/// Queries are stateless apart from a shared counter: query number `i`
/// draws its randomness from stream `i` of a ChaCha generator seeded with
/// the endpoint seed, so answers do not depend on thread scheduling.
#[derive(Debug)]
pub struct DefendedEndpoint {
    victim: Arc<Model>,
    surrogate: Option<Arc<Model>>,
    policy: DefensePolicy,
    seed: u64,
    issued: AtomicUsize,
    limit: Option<usize>,
    threads: usize,
}

impl DefendedEndpoint {
    pub fn new(
        victim: Arc<Model>,
        policy: DefensePolicy,
        surrogate: Option<Arc<Model>>,
        seed: u64,
    ) -> Result<Self> {
        policy.validate()?;
        if policy.kind.needs_jacobian() {
            let s = surrogate.as_ref().ok_or_else(|| {
                Error::invalid(format!("{} needs a surrogate model", policy.kind.name()))
            })?;
            if s.input_shape() != victim.input_shape() {
                return Err(Error::ShapeMismatch {
                    expected: victim.input_shape().to_vec(),
                    actual: s.input_shape().to_vec(),
                });
            }
            if s.num_classes() != victim.num_classes() {
                return Err(Error::LengthMismatch {
                    left: victim.num_classes(),
                    right: s.num_classes(),
                });
            }
        }
        let surrogate = surrogate.filter(|_| policy.kind.needs_jacobian());
        Ok(DefendedEndpoint {
            victim,
            surrogate,
            policy,
            seed,
            issued: AtomicUsize::new(0),
            limit: None,
            threads: 1,
        })
    }

    /// Refuses queries beyond `limit` in total.
    pub fn with_query_limit(mut self, limit: usize) -> Self {
        self.limit = Some(limit);
        self
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn policy(&self) -> &DefensePolicy {
        &self.policy
    }

    pub fn victim(&self) -> &Model {
        &self.victim
    }

    pub fn surrogate(&self) -> Option<&Model> {
        self.surrogate.as_deref()
    }

    pub fn queries_issued(&self) -> usize {
        self.issued.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> Option<usize> {
        self.limit.map(|l| l.saturating_sub(self.queries_issued()))
    }

    fn reserve(&self, n: usize) -> Result<usize> {
        let mut cur = self.issued.load(Ordering::SeqCst);
        loop {
            if let Some(limit) = self.limit {
                if cur + n > limit {
                    return Err(Error::BudgetExhausted(cur));
                }
            }
            match self
                .issued
                .compare_exchange(cur, cur + n, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => return Ok(cur),
                Err(actual) => cur = actual,
            }
        }
    }

    pub fn query(&self, x: &Tensor) -> Result<Answer> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let xs = x.clone().reshape(shape)?;
        Ok(self.query_batch(&xs)?.pop().expect("one answer"))
    }

    /// Answers a batch `[n, input_shape..]`, counting `n` queries.
    pub fn query_batch(&self, xs: &Tensor) -> Result<Vec<Answer>> {
        let n = xs.batch_len();
        let base = self.reserve(n)?;
        let prepared = prepare_queries(&self.victim, self.surrogate.as_deref(), xs, self.threads)?;
        self.answer_from(base, &prepared)
    }

    /// Answers queries whose geometry was prepared elsewhere (e.g. shared by
    /// several endpoints in a sweep). Counts one query per item.
    pub fn answer_prepared(&self, prepared: &[PreparedQuery]) -> Result<Vec<Answer>> {
        if self.policy.kind.needs_jacobian() && prepared.iter().any(|p| p.gram.is_none()) {
            return Err(Error::invalid("prepared queries lack the surrogate Jacobian"));
        }
        let base = self.reserve(prepared.len())?;
        self.answer_from(base, prepared)
    }

    fn answer_from(&self, base: usize, prepared: &[PreparedQuery]) -> Result<Vec<Answer>> {
        map_indexed(prepared.len(), self.threads, |i| {
            let q = &prepared[i];
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream((base + i) as u64);
            let p = self.policy.apply(&q.y, q.gram.as_ref(), &mut rng)?;
            let l1 = lp_dist(&p.posterior, &q.y, Norm::L1)?;
            Ok(Answer {
                posterior: p.posterior,
                audit: Audit {
                    l1,
                    y_star: p.y_star,
                },
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::{DefenseKind, SurrogateSpec};
    use crate::nn::{build, TrainConfig};

    fn setup(policy: DefensePolicy) -> DefendedEndpoint {
        let victim = Arc::new(build("mlp", &[4], 3, None, 1).unwrap());
        let surrogate = SurrogateSpec::random("mlp", 2)
            .build(&[4], 3, None, None, &TrainConfig::default())
            .unwrap();
        DefendedEndpoint::new(victim, policy, Some(Arc::new(surrogate)), 7).unwrap()
    }

    fn inputs(n: usize) -> Tensor {
        Tensor::new(vec![n, 4], (0..n * 4).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap()
    }

    #[test]
    fn counts_and_limits_queries() {
        let ep = setup(DefensePolicy::mad(0.5)).with_query_limit(5);
        ep.query_batch(&inputs(3)).unwrap();
        assert_eq!(ep.queries_issued(), 3);
        assert!(matches!(ep.query_batch(&inputs(3)), Err(Error::BudgetExhausted(3))));
        ep.query(&inputs(1).sample_tensor(0)).unwrap();
        assert_eq!(ep.remaining(), Some(1));
    }

    #[test]
    fn answers_respect_budget_and_are_thread_independent() {
        let xs = inputs(12);
        for kind in [DefenseKind::Mad, DefenseKind::MadRandYStar, DefenseKind::RandNoise] {
            let policy = DefensePolicy::with_epsilon(kind, 0.3);
            let a = setup(policy.clone()).query_batch(&xs).unwrap();
            let b = setup(policy).with_threads(3).query_batch(&xs).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|ans| ans.audit.l1 <= 0.3 + 1e-9));
        }
    }

    #[test]
    fn none_policy_returns_victim_posteriors() {
        let ep = setup(DefensePolicy::none());
        let xs = inputs(4);
        let direct = ep.victim().predict_batch(&xs, 2).unwrap();
        let answers = ep.query_batch(&xs).unwrap();
        for (a, y) in answers.iter().zip(&direct) {
            assert_eq!(&a.posterior, y);
            assert_eq!(a.audit.l1, 0.0);
        }
    }

    #[test]
    fn mad_requires_matching_surrogate() {
        let victim = Arc::new(build("mlp", &[4], 3, None, 1).unwrap());
        let wrong = Arc::new(build("mlp", &[4], 5, None, 1).unwrap());
        assert!(DefendedEndpoint::new(victim.clone(), DefensePolicy::mad(0.1), None, 0).is_err());
        assert!(DefendedEndpoint::new(victim, DefensePolicy::mad(0.1), Some(wrong), 0).is_err());
    }
}
