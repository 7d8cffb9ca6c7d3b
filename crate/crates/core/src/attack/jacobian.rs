use std::ops::ControlFlow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{collect_answers, training_targets, AttackConfig, Provenance, Strategy, Subversion, ADAM_LR};
use crate::data::{sample_queries, Audit, InputRef, QueryPool, TransferRecord, TransferSet};
use crate::defense::DefendedEndpoint;
use crate::error::{Error, Result};
use crate::nn::{build, fit, InputStats, Model, Optimizer, TrainConfig};
use crate::par::map_indexed;
use crate::simplex::Posterior;
use crate::tensor::Tensor;

/// `clip(x + λ·sgn(∇_x log F(x)_class))` to the valid input range.
pub fn augment_step(model: &Model, x: &Tensor, class: usize, lambda: f64, range: (f64, f64)) -> Result<Vec<f64>> {
    let g = model.input_gradient(x, class)?;
    Ok(x.data()
        .iter()
        .zip(&g)
        .map(|(&v, &d)| {
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            (v + lambda * s).clamp(range.0, range.1)
        })
        .collect())
}

/// Top `n` classes of `p`, ties to the lower index.
fn top_classes(p: &Posterior, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.num_classes()).collect();
    order.sort_by(|&a, &b| p.probs()[b].total_cmp(&p.probs()[a]).then(a.cmp(&b)));
    order.truncate(n.min(p.num_classes()));
    order
}

/// One augmentation round: new inputs derived from every sample of `xs`.
///
/// `jbda` follows the label the victim returned (`oracle_labels`), `jbself`
/// the attacker's own top class, `jbtop3` each of the attacker's three most
/// likely classes (one copy each).
pub fn jacobian_round(
    model: &Model,
    xs: &Tensor,
    oracle_labels: &[usize],
    strategy: Strategy,
    lambda: f64,
    range: (f64, f64),
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    if oracle_labels.len() != xs.batch_len() {
        return Err(Error::LengthMismatch {
            left: xs.batch_len(),
            right: oracle_labels.len(),
        });
    }
    let per = map_indexed(xs.batch_len(), threads, |i| {
        let x = xs.sample_tensor(i);
        let classes = match strategy {
            Strategy::Jbda => vec![oracle_labels[i]],
            Strategy::Jbself => vec![model.predict(&x)?.argmax()],
            Strategy::Jbtop3 => top_classes(&model.predict(&x)?, 3),
            Strategy::Knockoff => return Err(Error::invalid("knockoff has no augmentation rounds")),
        };
        classes
            .into_iter()
            .map(|c| augment_step(model, &x, c, lambda, range))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per.into_iter().flatten().collect())
}

/// Jacobian-based dataset augmentation: query a seed set drawn from
/// `seed_pool`, then alternate attacker training (`round_epochs`) and
/// augmentation rounds until the budget or `rounds` is exhausted. The last
/// round is truncated to fit the budget.
pub fn run_jacobian_attack(
    endpoint: &DefendedEndpoint,
    seed_pool: &QueryPool,
    cfg: &AttackConfig,
    fallback_arch: &str,
    threads: usize,
) -> Result<TransferSet> {
    cfg.validate()?;
    if !cfg.strategy.is_jacobian() {
        return Err(Error::invalid("run_jacobian_attack needs a jb* strategy"));
    }
    let max_inputs = cfg.budget / cfg.queries_per_input();
    let shape = seed_pool.inputs.sample_shape().to_vec();
    let seeds = sample_queries(seed_pool, cfg.seed_size, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let before = endpoint.queries_issued();

    let mut inputs = seed_pool.inputs.select(&seeds.indices);
    let mut refs: Vec<InputRef> = seeds.indices.iter().map(|&index| InputRef::Pool { index }).collect();
    let mut answers: Vec<(Posterior, Audit)> = collect_answers(endpoint, &inputs, cfg, &mut rng)?;
    let k = answers[0].0.num_classes();

    let arch = cfg.attacker_arch.as_deref().unwrap_or(fallback_arch);
    let mut model = build(arch, &shape, k, Some(&InputStats::from_batch(&inputs)), cfg.train_cfg.seed)?;
    let (optimizer, lr) = if cfg.has(Subversion::OptAdam) {
        (Optimizer::Adam, ADAM_LR)
    } else {
        (Optimizer::Sgd, cfg.train_cfg.lr)
    };
    let mut rounds = 0;
    while rounds < cfg.rounds && answers.len() < max_inputs {
        let round_cfg = TrainConfig {
            lr,
            epochs: cfg.round_epochs,
            seed: cfg.train_cfg.seed.wrapping_add(rounds as u64),
            ..cfg.train_cfg.clone()
        };
        let ts = partial_set(&shape, &answers);
        fit(&mut model, &inputs, &training_targets(&ts, cfg), &round_cfg, optimizer, |_, _| {
            ControlFlow::Continue(())
        })?;
        let labels: Vec<usize> = answers.iter().map(|(p, _)| p.argmax()).collect();
        let mut fresh = jacobian_round(&model, &inputs, &labels, cfg.strategy, cfg.lambda, cfg.input_range, threads)?;
        fresh.truncate(max_inputs - answers.len());
        let batch = Tensor::stack(&shape, fresh.iter().map(Vec::as_slice))?;
        answers.extend(collect_answers(endpoint, &batch, cfg, &mut rng)?);
        refs.extend(fresh.into_iter().map(|data| InputRef::Inline { data }));
        let mut all = inputs.into_data();
        all.extend_from_slice(batch.data());
        let mut s = vec![answers.len()];
        s.extend_from_slice(&shape);
        inputs = Tensor::new(s, all)?;
        rounds += 1;
    }

    let policy = endpoint.policy();
    let mut ts = TransferSet::new(shape, Some(seed_pool));
    for (input, (posterior, audit)) in refs.into_iter().zip(answers) {
        ts.push(TransferRecord {
            input,
            posterior,
            epsilon_used: policy.epsilon.unwrap_or(0.0),
            defense_tag: policy.tag(),
            audit: Some(audit),
        });
    }
    ts.provenance = serde_json::to_value(Provenance {
        attack: cfg.clone(),
        defense_tag: policy.tag(),
        queries_used: endpoint.queries_issued() - before,
        transfer_size: ts.len(),
        sampled_with_replacement: seeds.with_replacement,
        rounds_completed: rounds,
    })?;
    Ok(ts)
}

/// Answers only, for computing training targets mid-attack.
fn partial_set(shape: &[usize], answers: &[(Posterior, Audit)]) -> TransferSet {
    let mut ts = TransferSet::new(shape.to_vec(), None);
    for (p, _) in answers {
        ts.push(TransferRecord {
            input: InputRef::Inline { data: Vec::new() },
            posterior: p.clone(),
            epsilon_used: 0.0,
            defense_tag: String::new(),
            audit: None,
        });
    }
    ts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::defense::DefensePolicy;
    use std::sync::Arc;

    #[test]
    fn step_follows_finite_difference_sign() {
        let m = build("mlp", &[6], 4, None, 11).unwrap();
        let x = Tensor::new(vec![6], vec![0.3, 0.5, 0.2, 0.8, 0.6, 0.4]).unwrap();
        for class in 0..4 {
            let stepped = augment_step(&m, &x, class, 0.05, (0.0, 1.0)).unwrap();
            for i in 0..6 {
                let h = 1e-6;
                let mut a = x.data().to_vec();
                let mut b = a.clone();
                a[i] += h;
                b[i] -= h;
                let la = m.predict(&Tensor::new(vec![6], a).unwrap()).unwrap().probs()[class].ln();
                let lb = m.predict(&Tensor::new(vec![6], b).unwrap()).unwrap().probs()[class].ln();
                let fd = (la - lb) / (2.0 * h);
                let moved = stepped[i] - x.data()[i];
                if fd.abs() > 1e-6 {
                    assert_eq!(moved.signum(), fd.signum(), "class {class} coord {i}");
                    assert!((moved.abs() - 0.05).abs() < 1e-12);
                }
            }
        }
        let edge = Tensor::new(vec![6], vec![1.0; 6]).unwrap();
        let s = augment_step(&m, &edge, 0, 0.5, (0.0, 1.0)).unwrap();
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn endpoint() -> (DefendedEndpoint, QueryPool) {
        let data = synth_blobs(3, 40, 6, 0.1, 4).unwrap();
        let victim = crate::nn::sgd_train(
            build("mlp", &[6], 3, None, 1).unwrap(),
            &data,
            &TrainConfig {
                epochs: 10,
                batch_size: 16,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let ep = DefendedEndpoint::new(Arc::new(victim), DefensePolicy::none(), None, 0).unwrap();
        (ep, QueryPool::new(data.inputs, "blobs"))
    }

    #[test]
    fn rounds_double_and_stop_at_budget() {
        let (ep, pool) = endpoint();
        let mut cfg = AttackConfig::new(Strategy::Jbda, 70);
        cfg.seed_size = 10;
        cfg.round_epochs = 1;
        let ts = run_jacobian_attack(&ep, &pool, &cfg, "mlp", 1).unwrap();
        // 10 → 20 → 40 → 70 (last round truncated from 80).
        assert_eq!(ts.len(), 70);
        assert_eq!(ep.queries_issued(), 70);
        let prov: Provenance = serde_json::from_value(ts.provenance.clone()).unwrap();
        assert_eq!(prov.rounds_completed, 3);
        assert_eq!(prov.queries_used, 70);
        let xs = ts.materialize(Some(&pool)).unwrap();
        assert!(xs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn top3_emits_three_copies_and_is_deterministic() {
        let (ep, pool) = endpoint();
        let mut cfg = AttackConfig::new(Strategy::Jbtop3, 40);
        cfg.seed_size = 10;
        cfg.round_epochs = 1;
        cfg.rounds = 1;
        let a = run_jacobian_attack(&ep, &pool, &cfg, "mlp", 1).unwrap();
        assert_eq!(a.len(), 40);
        let (ep2, _) = endpoint();
        let b = run_jacobian_attack(&ep2, &pool, &cfg, "mlp", 2).unwrap();
        assert_eq!(a, b);

        cfg.subversions = vec![Subversion::Nquery { n: 2 }];
        cfg.budget = 60;
        let (ep3, _) = endpoint();
        let c = run_jacobian_attack(&ep3, &pool, &cfg, "mlp", 1).unwrap();
        assert_eq!(c.len(), 30);
        assert_eq!(ep3.queries_issued(), 60);
    }
}
