//! Maximizing Angular Deviation.
//!
//! The attacker's parameter update on an answer `ỹ` is proportional to
//! `Gᵀỹ`, where `G` is the Jacobian of the log-likelihoods. MAD picks the
//! simplex extreme `y*` whose update direction is farthest from the clean
//! one, then moves `y` toward it as far as the budget allows.
//!
//! Every quantity the solver needs is a quadratic form in the `K × K` Gram
//! matrix `M = GGᵀ`, so the `D`-dimensional Jacobian is only touched once
//! per input.

use rand::Rng;

use super::Perturbation;
use crate::error::{Error, Result};
use crate::nn::JacobianMatrix;
use crate::simplex::{self, interpolate, opt_step, Budget, Posterior};

/// `‖Gᵀỹ/‖Gᵀỹ‖ − Gᵀy/‖Gᵀy‖‖²`, computed directly in parameter space.
///
/// Fails with [`Error::DegenerateDirection`] when either projection is zero.
pub fn mad_objective(y_tilde: &Posterior, y: &Posterior, g: &JacobianMatrix) -> Result<f64> {
    if y_tilde.num_classes() != g.rows() || y.num_classes() != g.rows() {
        return Err(Error::LengthMismatch {
            left: g.rows(),
            right: y.num_classes(),
        });
    }
    let a = g.project(y_tilde.probs());
    let u = g.project(y.probs());
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nu == 0.0 {
        return Err(Error::DegenerateDirection);
    }
    Ok(a.iter()
        .zip(&u)
        .map(|(a, u)| (a / na - u / nu).powi(2))
        .sum())
}

/// Symmetric `K × K` Gram matrix `GGᵀ` of a log-likelihood Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct Gram {
    k: usize,
    m: Vec<f64>,
}

impl Gram {
    pub fn new(k: usize, m: Vec<f64>) -> Result<Self> {
        if k < 2 || m.len() != k * k || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("gram matrix must be a finite K×K matrix with K ≥ 2"));
        }
        Ok(Gram { k, m })
    }

    pub fn from_jacobian(g: &JacobianMatrix) -> Self {
        Gram {
            k: g.rows(),
            m: g.gram(),
        }
    }

    /// Gram matrix of `G = I`.
    pub fn identity(k: usize) -> Self {
        let mut m = vec![0.0; k * k];
        for i in 0..k {
            m[i * k + i] = 1.0;
        }
        Gram { k, m }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.k + j]
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.m
            .chunks(self.k)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn scale(&self) -> f64 {
        (0..self.k).map(|i| self.entry(i, i)).fold(0.0, f64::max)
    }

    /// The MAD objective evaluated through `M`:
    /// `2 − 2·ỹᵀMy / √(ỹᵀMỹ · yᵀMy)`.
    pub fn objective(&self, y_tilde: &Posterior, y: &Posterior) -> Result<f64> {
        if y_tilde.num_classes() != self.k || y.num_classes() != self.k {
            return Err(Error::LengthMismatch {
                left: self.k,
                right: y.num_classes(),
            });
        }
        let my = self.apply(y.probs());
        let uu = dot(y.probs(), &my);
        let aa = dot(y_tilde.probs(), &self.apply(y_tilde.probs()));
        let au = dot(y_tilde.probs(), &my);
        cosine_objective(au, aa, uu, self.scale())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// Squared distance of unit vectors from their inner products. Squared
/// norms at or below `1e-28·scale` count as zero.
fn cosine_objective(au: f64, aa: f64, uu: f64, scale: f64) -> Result<f64> {
    let floor = 1e-28 * scale;
    if aa <= floor || uu <= floor {
        return Err(Error::DegenerateDirection);
    }
    let cos = (au / (aa.sqrt() * uu.sqrt())).clamp(-1.0, 1.0);
    Ok(2.0 - 2.0 * cos)
}

/// Objectives at or below this are rounding noise around 0.
const MIN_OBJECTIVE: f64 = 1e-12;

/// Scores every candidate extreme and returns the best `(class, objective)`;
/// `None` when nothing scores above [`MIN_OBJECTIVE`].
///
/// Candidate `j` is `e_j`, or `(e_k + e_j)/2` in argmax mode (with `e_k`
/// itself for `j == k`). Candidates are scored in the order of
/// [`simplex::extremes`] / [`simplex::extremes_argmax`]; ties keep the first.
fn best_extreme(y: &Posterior, gram: &Gram, argmax_mode: bool) -> Option<(usize, f64)> {
    let k = gram.k;
    let my = gram.apply(y.probs());
    let uu = dot(y.probs(), &my);
    let scale = gram.scale();
    let top = y.argmax();
    let order = std::iter::once(top)
        .filter(|_| argmax_mode)
        .chain((0..k).filter(|&j| !argmax_mode || j != top));
    let mut best: Option<(usize, f64)> = None;
    for j in order {
        let (au, aa) = if !argmax_mode || j == top {
            (my[j], gram.entry(j, j))
        } else {
            (
                0.5 * (my[top] + my[j]),
                0.25 * (gram.entry(top, top) + 2.0 * gram.entry(top, j) + gram.entry(j, j)),
            )
        };
        let h = cosine_objective(au, aa, uu, scale).unwrap_or(0.0);
        if h > best.map_or(MIN_OBJECTIVE, |b| b.1) {
            best = Some((j, h));
        }
    }
    best
}

fn candidate(k: usize, top: usize, j: usize, argmax_mode: bool) -> Posterior {
    if !argmax_mode || j == top {
        return Posterior::one_hot(k, j);
    }
    let mut p = vec![0.0; k];
    p[top] = 0.5;
    p[j] = 0.5;
    Posterior::new(p).expect("midpoint of two vertices")
}

/// Steps toward `y_star` by the largest budget-feasible `α`; in argmax mode
/// backs `α` off until the top class of `y` is still the (lowest-index)
/// argmax.
fn step_toward(
    y: &Posterior,
    y_star: &Posterior,
    budget: Budget,
    keep_top: bool,
) -> Result<(Posterior, f64)> {
    let mut alpha = opt_step(y, y_star, budget);
    let mut out = interpolate(y, y_star, alpha)?;
    if keep_top {
        let top = y.argmax();
        let mut back = 4.0 * f64::EPSILON;
        while out.argmax() != top {
            alpha = (alpha - back).max(0.0);
            back *= 2.0;
            out = interpolate(y, y_star, alpha)?;
        }
    }
    Ok((out, alpha))
}

/// MAD with a precomputed Gram matrix.
pub fn mad_perturb_gram(
    y: &Posterior,
    gram: &Gram,
    budget: Budget,
    argmax_mode: bool,
) -> Result<Perturbation> {
    let k = y.num_classes();
    if gram.k != k {
        return Err(Error::LengthMismatch {
            left: gram.k,
            right: k,
        });
    }
    let Some((j, _)) = best_extreme(y, gram, argmax_mode) else {
        return Ok(Perturbation::unchanged(y));
    };
    let y_star = candidate(k, y.argmax(), j, argmax_mode);
    let (posterior, alpha) = step_toward(y, &y_star, budget, argmax_mode)?;
    Ok(Perturbation {
        posterior,
        y_star: Some(j),
        alpha,
    })
}

/// Perturbs `y` within `budget` to maximize the angular deviation of the
/// update direction `Gᵀỹ` from `Gᵀy`.
///
/// In argmax mode the search runs over [`simplex::extremes_argmax`] and the
/// result keeps the top-1 class of `y`. A degenerate `G` (no candidate with
/// a positive objective) leaves `y` unchanged.
pub fn mad_perturb(
    y: &Posterior,
    g: &JacobianMatrix,
    budget: Budget,
    argmax_mode: bool,
) -> Result<Perturbation> {
    mad_perturb_gram(y, &Gram::from_jacobian(g), budget, argmax_mode)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    /// Solve with `G = I`, ignoring the model.
    IdentityG,
    /// Step toward a uniformly random vertex instead of the best one.
    RandYStar,
}

/// The two ablated MAD solvers.
pub fn mad_ablation_perturb<R: Rng + ?Sized>(
    y: &Posterior,
    budget: Budget,
    variant: AblationVariant,
    rng: &mut R,
) -> Result<Perturbation> {
    let k = y.num_classes();
    match variant {
        AblationVariant::IdentityG => mad_perturb_gram(y, &Gram::identity(k), budget, false),
        AblationVariant::RandYStar => {
            let j = rng.gen_range(0..k);
            let y_star = simplex::extremes(k)?.nth(j).expect("j < k");
            let (posterior, alpha) = step_toward(y, &y_star, budget, false)?;
            Ok(Perturbation {
                posterior,
                y_star: Some(j),
                alpha,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::{lp_dist, Norm};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn jac(rows: usize, cols: usize, data: &[f64]) -> JacobianMatrix {
        JacobianMatrix::new(rows, cols, data.to_vec()).unwrap()
    }

    fn post(p: &[f64]) -> Posterior {
        Posterior::new(p.to_vec()).unwrap()
    }

    #[test]
    fn objective_examples() {
        let g = jac(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        let y = post(&[1.0, 0.0, 0.0]);
        assert_eq!(mad_objective(&y, &y, &g).unwrap(), 0.0);
        let h = mad_objective(&post(&[0.0, 1.0, 0.0]), &y, &g).unwrap();
        assert!((h - 2.0).abs() < 1e-15);
        let flip = mad_objective(&post(&[0.0, 0.0, 1.0]), &y, &g).unwrap();
        assert!((flip - 4.0).abs() < 1e-15);
        let same_rows = jac(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            mad_objective(&post(&[0.5, 0.5]), &post(&[0.5, 0.5]), &jac(2, 1, &[1.0, -1.0])),
            Err(Error::DegenerateDirection)
        ));
        assert_eq!(mad_objective(&post(&[0.5, 0.5]), &post(&[1.0, 0.0]), &same_rows).unwrap(), 0.0);
    }

    #[test]
    fn gram_route_matches_direct_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let k = rng.gen_range(2..7);
            let d = rng.gen_range(1..30);
            let g = jac(k, d, &(0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            let a = Posterior::normalized((0..k).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let b = Posterior::normalized((0..k).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let direct = mad_objective(&a, &b, &g).unwrap();
            let gram = Gram::from_jacobian(&g).objective(&a, &b).unwrap();
            assert!((direct - gram).abs() < 1e-9, "{direct} vs {gram}");
        }
    }

    #[test]
    fn zero_budget_and_full_budget() {
        let g = jac(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        let y = post(&[0.6, 0.3, 0.1]);
        let p = mad_perturb(&y, &g, Budget::l1(0.0).unwrap(), false).unwrap();
        assert_eq!(p.posterior, y);
        let p = mad_perturb(&y, &g, Budget::l1(2.0).unwrap(), false).unwrap();
        let j = p.y_star.unwrap();
        assert_eq!(p.posterior, Posterior::one_hot(3, j));
        assert_eq!(p.alpha, 1.0);
    }

    #[test]
    fn degenerate_jacobian_leaves_y() {
        // Identical rows: every Gᵀỹ is the same vector.
        let g = jac(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let y = post(&[0.2, 0.5, 0.3]);
        let p = mad_perturb(&y, &g, Budget::l1(1.0).unwrap(), false).unwrap();
        assert_eq!(p.posterior, y);
        assert_eq!(p.y_star, None);
    }

    #[test]
    fn identity_g_two_class_example() {
        let y = post(&[0.9, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = mad_ablation_perturb(&y, Budget::l1(2.0).unwrap(), AblationVariant::IdentityG, &mut rng)
            .unwrap();
        assert_eq!(p.posterior, post(&[0.0, 1.0]));
    }

    #[test]
    fn rand_ystar_is_seeded() {
        let y = post(&[0.5, 0.2, 0.2, 0.1]);
        let b = Budget::l1(0.4).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| mad_ablation_perturb(&y, b, AblationVariant::RandYStar, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert!(run(3).iter().all(|p| lp_dist(&p.posterior, &y, Norm::L1).unwrap() <= 0.4 + 1e-12));
    }

    #[test]
    fn argmax_tie_at_full_step_is_backed_off() {
        // y* = (e_1 + e_0)/2 at α = 1 would tie classes 0 and 1 and hand the
        // lowest-index argmax to class 0.
        let g = jac(2, 2, &[-1.0, 1.0, 1.0, 0.0]);
        let y = post(&[0.3, 0.7]);
        let p = mad_perturb(&y, &g, Budget::l1(2.0).unwrap(), true).unwrap();
        assert_eq!(p.y_star, Some(0));
        assert_eq!(p.posterior.argmax(), 1);
        assert!(p.alpha < 1.0);
        assert!(p.posterior.probs()[1] - 0.5 < 1e-9);
    }

    fn arb_instance() -> impl Strategy<Value = (Posterior, JacobianMatrix, f64)> {
        (2usize..6, 1usize..12).prop_flat_map(|(k, d)| {
            (
                prop::collection::vec(0.001f64..1.0, k),
                prop::collection::vec(-1.0f64..1.0, k * d),
                0.0f64..=2.0,
            )
                .prop_map(move |(y, g, eps)| {
                    (
                        Posterior::normalized(y).unwrap(),
                        JacobianMatrix::new(k, d, g).unwrap(),
                        eps,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn stays_within_budget_and_simplex((y, g, eps) in arb_instance(), argmax_mode: bool) {
            let p = mad_perturb(&y, &g, Budget::l1(eps).unwrap(), argmax_mode).unwrap();
            prop_assert!(Posterior::new(p.posterior.probs().to_vec()).is_ok());
            prop_assert!(lp_dist(&p.posterior, &y, Norm::L1).unwrap() <= eps + 1e-9);
            if argmax_mode {
                prop_assert_eq!(p.posterior.argmax(), y.argmax());
            }
        }

        #[test]
        fn objective_grows_along_the_path((y, g, _eps) in arb_instance(), j in 0usize..5) {
            let k = y.num_classes();
            let y_star = Posterior::one_hot(k, j % k);
            let mut last = 0.0;
            for step in 0..=20 {
                let yt = interpolate(&y, &y_star, step as f64 / 20.0).unwrap();
                if let Ok(h) = mad_objective(&yt, &y, &g) {
                    prop_assert!(h >= last - 1e-9);
                    last = h;
                }
            }
        }
    }
}
