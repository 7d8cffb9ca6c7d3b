//! Non-MAD perturbations: reverse sigmoid, logit noise, rounding, top-k.

use rand::Rng;

use crate::error::{Error, Result};
use crate::simplex::{argmax, project_l1_ball, Posterior};

const CLAMP: f64 = 1e-12;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(CLAMP, 1.0 - CLAMP);
    (p / (1.0 - p)).ln()
}

/// Largest entry other than `top`.
fn runner_up(values: &[f64], top: usize) -> f64 {
    values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &v)| v)
        .fold(0.0, f64::max)
}

/// `ỹ_k ∝ max(0, y_k − β(σ(γ·logit y_k) − η))` with `η = σ(γ·logit(1/K))`,
/// so the uniform posterior is a fixed point.
///
/// Large probabilities shrink and small ones grow, flattening the
/// non-argmax mass. For flat inputs a small class can overtake the top one;
/// the top class is then lifted just above the runner-up so the argmax is
/// unchanged.
pub fn reverse_sigmoid_perturb(y: &Posterior, beta: f64, gamma: f64) -> Result<Posterior> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta {beta} outside [0, 1]")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    if beta == 0.0 {
        return Ok(y.clone());
    }
    let k = y.num_classes();
    let eta = sigmoid(gamma * logit(1.0 / k as f64));
    let mut r: Vec<f64> = y
        .probs()
        .iter()
        .map(|&p| (p - beta * (sigmoid(gamma * logit(p)) - eta)).max(0.0))
        .collect();
    let top = y.argmax();
    if argmax(&r) != top {
        r[top] = runner_up(&r, top) * (1.0 + 1e-9) + 1e-12;
    }
    Posterior::normalized(r)
}

/// Uniform noise on the logits `z = log(y / (1 − y))`, projected onto the
/// L1 ball of radius `eps_z`, mapped back through the logistic function and
/// renormalized.
///
/// The logistic function is ¼-Lipschitz, so `‖ỹ − y‖₁ ≤ eps_z / 2`.
pub fn rand_noise_perturb<R: Rng + ?Sized>(y: &Posterior, eps_z: f64, rng: &mut R) -> Result<Posterior> {
    if !(eps_z >= 0.0 && eps_z.is_finite()) {
        return Err(Error::invalid(format!("eps_z must be non-negative, got {eps_z}")));
    }
    let delta: Vec<f64> = if eps_z > 0.0 {
        let raw: Vec<f64> = (0..y.num_classes())
            .map(|_| rng.gen_range(-eps_z..=eps_z))
            .collect();
        project_l1_ball(&raw, eps_z)?
    } else {
        vec![0.0; y.num_classes()]
    };
    let v = y
        .probs()
        .iter()
        .zip(&delta)
        .map(|(&p, d)| sigmoid(logit(p) + d))
        .collect();
    Posterior::normalized(v)
}

/// Rounds every probability to `decimals` places and renormalizes.
///
/// Rounding can tie the top class with a lower-index class; the top class
/// then gains one rounding unit over the runner-up. If everything rounds
/// to zero the answer is the one-hot of the argmax.
pub fn rounding_perturb(y: &Posterior, decimals: u32) -> Result<Posterior> {
    if decimals > 15 {
        return Err(Error::invalid(format!("at most 15 decimals, got {decimals}")));
    }
    let top = y.argmax();
    let scale = 10f64.powi(decimals as i32);
    let mut r: Vec<f64> = y.probs().iter().map(|p| (p * scale).round() / scale).collect();
    if r.iter().all(|&v| v == 0.0) {
        return Ok(Posterior::one_hot(y.num_classes(), top));
    }
    if argmax(&r) != top {
        r[top] = runner_up(&r, top) + 1.0 / scale;
    }
    Posterior::normalized(r)
}

/// Keeps the `k` largest probabilities (ties to the lower index), zeroes the
/// rest and renormalizes.
pub fn topk_perturb(y: &Posterior, k: usize) -> Result<Posterior> {
    let n = y.num_classes();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k must be in [1, {n}], got {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y.probs()[b].total_cmp(&y.probs()[a]).then(a.cmp(&b)));
    let mut r = vec![0.0; n];
    for &i in &order[..k] {
        r[i] = y.probs()[i];
    }
    if r.iter().all(|&v| v == 0.0) {
        return Ok(Posterior::one_hot(n, y.argmax()));
    }
    Posterior::normalized(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::{entropy, lp_dist, LogBase, Norm};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn post(p: &[f64]) -> Posterior {
        Posterior::new(p.to_vec()).unwrap()
    }

    fn arb_posterior() -> impl Strategy<Value = Posterior> {
        (2usize..12).prop_flat_map(|k| {
            (prop::collection::vec(0.0f64..1.0, k), 0.05f64..4.0).prop_map(|(v, sharp)| {
                let w: Vec<f64> = v.iter().map(|x| x.powf(1.0 / sharp) + 1e-9).collect();
                Posterior::normalized(w).unwrap()
            })
        })
    }

    #[test]
    fn reverse_sigmoid_fixed_points() {
        let y = post(&[0.7, 0.2, 0.1]);
        assert_eq!(reverse_sigmoid_perturb(&y, 0.0, 0.2).unwrap(), y);
        let u = Posterior::uniform(10);
        let out = reverse_sigmoid_perturb(&u, 0.8, 0.2).unwrap();
        assert!(out.probs().iter().all(|p| (p - 0.1).abs() < 1e-12));
        assert!(reverse_sigmoid_perturb(&y, 1.5, 0.2).is_err());
        assert!(reverse_sigmoid_perturb(&y, 0.5, 0.0).is_err());
        let hard = reverse_sigmoid_perturb(&post(&[0.0, 1.0, 0.0]), 1.0, 0.2).unwrap();
        assert_eq!(hard.argmax(), 1);
    }

    #[test]
    fn rand_noise_identity_at_zero() {
        let y = post(&[0.0, 0.25, 0.75]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = rand_noise_perturb(&y, 0.0, &mut rng).unwrap();
        assert!(lp_dist(&out, &y, Norm::L1).unwrap() < 1e-9);
    }

    #[test]
    fn rand_noise_is_seeded() {
        let y = post(&[0.1, 0.6, 0.3]);
        let a = rand_noise_perturb(&y, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = rand_noise_perturb(&y, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = rand_noise_perturb(&y, 0.5, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rounding_and_topk_examples() {
        let y = post(&[0.123456789012, 0.5, 0.376543210988]);
        assert!(lp_dist(&rounding_perturb(&y, 9).unwrap(), &y, Norm::L1).unwrap() < 1e-9);
        assert_eq!(topk_perturb(&y, 1).unwrap(), Posterior::one_hot(3, 1));
        assert_eq!(topk_perturb(&y, 3).unwrap(), y);
        assert!(topk_perturb(&y, 0).is_err());
        assert!(topk_perturb(&y, 4).is_err());
        // 0.41 and 0.44 both round to 0.4; class 1 keeps the lead.
        let tie = rounding_perturb(&post(&[0.41, 0.44, 0.15]), 1).unwrap();
        assert_eq!(tie.argmax(), 1);
        assert_eq!(rounding_perturb(&Posterior::uniform(10), 0).unwrap().argmax(), 0);
    }

    #[test]
    fn reverse_sigmoid_entropy_grows_with_beta() {
        // Never below H(y). Monotone in β for confident posteriors; for flat
        // ones the smallest classes overtake mid-sized ones at large β and
        // entropy falls back somewhat.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..4000 {
            let conc = [0.05, 0.3, 1.0, 5.0][rng.gen_range(0..4)];
            let w: Vec<f64> = (0..10).map(|_| rng.gen::<f64>().powf(1.0 / conc)).collect();
            let y = Posterior::normalized(w).unwrap();
            let h0 = entropy(&y, LogBase::Two);
            let hs: Vec<f64> = (0..=40)
                .map(|i| entropy(&reverse_sigmoid_perturb(&y, i as f64 / 40.0, 0.2).unwrap(), LogBase::Two))
                .collect();
            assert!(hs.iter().all(|&h| h >= h0 - 1e-9));
            if y.probs()[y.argmax()] >= 0.8 {
                for w in hs.windows(2) {
                    assert!(w[1] >= w[0] - 1e-9, "{:?}", y.probs());
                }
            }
        }
    }

    proptest! {
        #[test]
        fn argmax_preserving_baselines(y in arb_posterior(), beta in 0.0f64..=1.0, gamma in 0.05f64..2.0, d in 0u32..4) {
            let top = y.argmax();
            prop_assert_eq!(reverse_sigmoid_perturb(&y, beta, gamma).unwrap().argmax(), top);
            prop_assert_eq!(rounding_perturb(&y, d).unwrap().argmax(), top);
            for k in 1..=y.num_classes() {
                prop_assert_eq!(topk_perturb(&y, k).unwrap().argmax(), top);
            }
        }

        #[test]
        fn rand_noise_budget(y in arb_posterior(), eps in 0.0f64..=2.0, seed: u64) {
            let out = rand_noise_perturb(&y, eps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(lp_dist(&out, &y, Norm::L1).unwrap() <= eps / 2.0 + 1e-9);
        }
    }
}
