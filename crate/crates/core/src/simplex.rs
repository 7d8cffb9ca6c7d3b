//! Geometry of the probability simplex.
//!
//! Posteriors live on `Δ^K = {y ⪰ 0, Σ y = 1}`. This module provides the
//! vertex sets used by the perturbation solver (the plain simplex and the
//! argmax-constrained polytope `Δ^K_k = {y ∈ Δ^K : y_k ≥ y_j}`), the
//! interpolation path between two posteriors, the budgeted step-size search
//! along that path, and a few distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating that a vector sums to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Posterior(Vec<f64>);

impl Posterior {
    /// Validates `probs` as a point of `Δ^K` (K ≥ 1).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPosterior("empty vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidPosterior(format!("entry {p} outside [0, ∞)")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidPosterior(format!("sums to {sum}")));
        }
        Ok(Posterior(probs))
    }

    /// Clips negatives to zero and divides by the sum.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            if !v.is_finite() {
                return Err(Error::InvalidPosterior(format!("non-finite entry {v}")));
            }
            *v = v.max(0.0);
        }
        let sum: f64 = values.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidPosterior("all entries are zero".into()));
        }
        values.iter_mut().for_each(|v| *v /= sum);
        Ok(Posterior(values))
    }

    pub fn uniform(k: usize) -> Self {
        Posterior(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Posterior(probs)
    }

    /// Caller guarantees the simplex invariants.
    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(Posterior::new(probs.clone()).is_ok(), "{probs:?}");
        Posterior(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Whether this point lies in `Δ^K_k`, i.e. `y_k ≥ y_j` for every `j`.
    pub fn in_argmax_region(&self, k: usize) -> bool {
        self.0.iter().all(|&p| self.0[k] >= p)
    }
}

impl TryFrom<Vec<f64>> for Posterior {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Posterior::new(value)
    }
}

impl From<Posterior> for Vec<f64> {
    fn from(value: Posterior) -> Self {
        value.0
    }
}

/// Lowest index attaining the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    /// Diameter of the simplex under this norm.
    pub fn simplex_diameter(self) -> f64 {
        match self {
            Norm::L1 => 2.0,
            Norm::L2 => std::f64::consts::SQRT_2,
        }
    }

    pub fn of(self, v: impl IntoIterator<Item = f64>) -> f64 {
        match self {
            Norm::L1 => v.into_iter().map(f64::abs).sum(),
            Norm::L2 => v.into_iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

/// Utility budget: perturbed posteriors must stay within `epsilon` of the
/// original under `norm`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon: f64,
    pub norm: Norm,
}

impl Budget {
    pub fn new(epsilon: f64, norm: Norm) -> Result<Self> {
        if !(0.0..=norm.simplex_diameter()).contains(&epsilon) {
            return Err(Error::invalid(format!(
                "epsilon {epsilon} outside [0, {}] for {norm:?}",
                norm.simplex_diameter()
            )));
        }
        Ok(Budget { epsilon, norm })
    }

    pub fn l1(epsilon: f64) -> Result<Self> {
        Budget::new(epsilon, Norm::L1)
    }
}

/// The `K` vertices of `Δ^K`.
pub fn extremes(k: usize) -> Result<impl Iterator<Item = Posterior>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {k}")));
    }
    Ok((0..k).map(move |i| Posterior::one_hot(k, i)))
}

/// `e_k` followed by `(e_k + e_j) / 2` for every `j ≠ k`, in index order.
///
/// These are the vertices of `Δ^K_k` with support of size at most two. The
/// full vertex set (uniform distributions over every class subset containing
/// `k`) is exponential in `K`.
pub fn extremes_argmax(k: usize, class: usize) -> Result<impl Iterator<Item = Posterior>> {
    if class >= k {
        return Err(Error::invalid(format!("class {class} out of range for K={k}")));
    }
    let pairs = (0..k).filter(move |&j| j != class).map(move |j| {
        let mut probs = vec![0.0; k];
        probs[class] = 0.5;
        probs[j] = 0.5;
        Posterior(probs)
    });
    Ok(std::iter::once(Posterior::one_hot(k, class)).chain(pairs))
}

/// `h(α) = (1 − α) y + α y*`.
pub fn interpolate(y: &Posterior, y_star: &Posterior, alpha: f64) -> Result<Posterior> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    check_same_len(y.probs(), y_star.probs())?;
    if alpha == 0.0 {
        return Ok(y.clone());
    }
    if alpha == 1.0 {
        return Ok(y_star.clone());
    }
    let probs = y
        .probs()
        .iter()
        .zip(y_star.probs())
        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
        .collect();
    Ok(Posterior(probs))
}

/// Largest `α ∈ [0, 1]` with `‖h(α) − y‖_p ≤ ε`.
///
/// Since `‖h(α) − y‖ = α‖y* − y‖`, this is `min(ε / ‖y − y*‖_p, 1)`.
/// Returns 0 when `y == y*`.
pub fn opt_step(y: &Posterior, y_star: &Posterior, budget: Budget) -> f64 {
    let dist = budget
        .norm
        .of(y.probs().iter().zip(y_star.probs()).map(|(a, b)| a - b));
    if dist == 0.0 {
        return 0.0;
    }
    let alpha = (budget.epsilon / dist).min(1.0);
    // ε/d·d can land one ulp above ε; step back until the constraint holds.
    let mut alpha = alpha;
    while alpha > 0.0 && alpha * dist > budget.epsilon {
        alpha = f64::from_bits(alpha.to_bits() - 1);
    }
    alpha
}

/// Bisection variant of [`opt_step`] for an arbitrary distance that is
/// non-decreasing along the interpolation path.
///
/// Stops once `|dist − ε| ≤ 1e-6` or after 60 halvings; the returned `α`
/// always satisfies the budget.
pub fn opt_step_bisect<F>(y: &Posterior, y_star: &Posterior, epsilon: f64, dist: F) -> Result<f64>
where
    F: Fn(&Posterior, &Posterior) -> f64,
{
    let at = |alpha: f64| -> Result<f64> { Ok(dist(&interpolate(y, y_star, alpha)?, y)) };
    if at(1.0)? <= epsilon {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let d = at(mid)?;
        if d <= epsilon {
            lo = mid;
            if epsilon - d <= 1e-6 {
                break;
            }
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Euclidean projection onto the L1 ball `{w : ‖w‖₁ ≤ radius}`.
///
/// Sort-based method: project `|v|` onto the scaled simplex and restore signs.
pub fn project_l1_ball(v: &[f64], radius: f64) -> Result<Vec<f64>> {
    if !(radius >= 0.0) {
        return Err(Error::invalid(format!("negative radius {radius}")));
    }
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return Ok(v.to_vec());
    }
    if radius == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - radius) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    Ok(v.iter()
        .map(|&x| x.signum() * (x.abs() - theta).max(0.0))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogBase {
    Two,
    E,
}

/// Shannon entropy with `0 · log 0 = 0`.
pub fn entropy(y: &Posterior, base: LogBase) -> f64 {
    let nats: f64 = y
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    match base {
        LogBase::E => nats,
        LogBase::Two => nats / std::f64::consts::LN_2,
    }
}

pub fn lp_dist(a: &Posterior, b: &Posterior, norm: Norm) -> Result<f64> {
    check_same_len(a.probs(), b.probs())?;
    Ok(norm.of(a.probs().iter().zip(b.probs()).map(|(x, y)| x - y)))
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn post(v: &[f64]) -> Posterior {
        Posterior::new(v.to_vec()).unwrap()
    }

    #[test]
    fn extremes_are_one_hots() {
        let e: Vec<_> = extremes(2).unwrap().collect();
        assert_eq!(e, vec![post(&[1.0, 0.0]), post(&[0.0, 1.0])]);
        let e: Vec<_> = extremes(10).unwrap().collect();
        assert_eq!(e.len(), 10);
        for (i, p) in e.iter().enumerate() {
            assert!(Posterior::new(p.probs().to_vec()).is_ok());
            assert_eq!(p.probs()[i], 1.0);
        }
        assert!(extremes(1).is_err());
    }

    #[test]
    fn argmax_extremes() {
        let e: Vec<_> = extremes_argmax(3, 0).unwrap().collect();
        assert_eq!(
            e,
            vec![
                post(&[1.0, 0.0, 0.0]),
                post(&[0.5, 0.5, 0.0]),
                post(&[0.5, 0.0, 0.5])
            ]
        );
        let e: Vec<_> = extremes_argmax(2, 1).unwrap().collect();
        assert_eq!(e, vec![post(&[0.0, 1.0]), post(&[0.5, 0.5])]);
        for k in 0..7 {
            let pts: Vec<_> = extremes_argmax(7, k).unwrap().collect();
            assert_eq!(pts.len(), 7);
            assert!(pts.iter().all(|p| p.in_argmax_region(k)));
        }
        assert!(extremes_argmax(3, 3).is_err());
    }

    #[test]
    fn interpolation_endpoints() {
        let y = post(&[1.0, 0.0]);
        let ys = post(&[0.0, 1.0]);
        assert_eq!(interpolate(&y, &ys, 0.0).unwrap(), y);
        assert_eq!(interpolate(&y, &ys, 1.0).unwrap(), ys);
        assert_eq!(interpolate(&y, &ys, 0.5).unwrap(), post(&[0.5, 0.5]));
        assert!(interpolate(&y, &ys, 1.5).is_err());
        assert!(interpolate(&y, &ys, -0.1).is_err());
    }

    #[test]
    fn opt_step_examples() {
        let y = post(&[1.0, 0.0]);
        let ys = post(&[0.0, 1.0]);
        let alpha = opt_step(&y, &ys, Budget::l1(1.0).unwrap());
        assert_eq!(alpha, 0.5);
        assert_eq!(interpolate(&y, &ys, alpha).unwrap(), post(&[0.5, 0.5]));
        assert_eq!(opt_step(&y, &ys, Budget::l1(2.0).unwrap()), 1.0);
        assert_eq!(opt_step(&y, &ys, Budget::l1(0.0).unwrap()), 0.0);
        assert_eq!(opt_step(&y, &y, Budget::l1(1.0).unwrap()), 0.0);
        let y2 = post(&[0.7, 0.2, 0.1]);
        assert_eq!(opt_step(&y2, &ys_of(3, 2), Budget::new(1.4, Norm::L2).unwrap()), 1.0);
    }

    fn ys_of(k: usize, i: usize) -> Posterior {
        Posterior::one_hot(k, i)
    }

    #[test]
    fn bisection_agrees_with_closed_form() {
        let y = post(&[0.6, 0.3, 0.1]);
        let ys = ys_of(3, 2);
        for eps in [0.0, 0.1, 0.5, 1.0, 1.7] {
            let budget = Budget::l1(eps).unwrap();
            let closed = opt_step(&y, &ys, budget);
            let bisect =
                opt_step_bisect(&y, &ys, eps, |a, b| lp_dist(a, b, Norm::L1).unwrap()).unwrap();
            assert!((closed - bisect).abs() < 1e-5, "{eps}: {closed} vs {bisect}");
        }
    }

    #[test]
    fn budget_validation() {
        assert!(Budget::l1(2.0).is_ok());
        assert!(Budget::l1(2.1).is_err());
        assert!(Budget::new(1.5, Norm::L2).is_err());
        assert!(Budget::l1(-0.1).is_err());
    }

    #[test]
    fn l1_projection_examples() {
        assert_eq!(project_l1_ball(&[0.2, -0.3], 1.0).unwrap(), vec![0.2, -0.3]);
        assert_eq!(project_l1_ball(&[3.0, 0.0], 1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(project_l1_ball(&[-3.0, 0.0], 1.0).unwrap(), vec![-1.0, 0.0]);
        assert_eq!(project_l1_ball(&[1.0, 1.0], 0.0).unwrap(), vec![0.0, 0.0]);
        assert!(project_l1_ball(&[1.0], -1.0).is_err());
    }

    /// Brute-force QP: enumerate every support set `S`, solve the
    /// equality-constrained problem `Σ_S |w_i| = r` in closed form, keep the
    /// best feasible candidate. The interior solution `w = v` is included.
    fn enumerate_projection(v: &[f64], radius: f64) -> Vec<f64> {
        let dist = |w: &[f64]| -> f64 { w.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum() };
        let mut best: Option<(f64, Vec<f64>)> = None;
        if v.iter().map(|x| x.abs()).sum::<f64>() <= radius {
            return v.to_vec();
        }
        for mask in 0u32..(1 << v.len()) {
            let support: Vec<usize> = (0..v.len()).filter(|i| mask & (1 << i) != 0).collect();
            let mut w = vec![0.0; v.len()];
            if !support.is_empty() {
                let mass: f64 = support.iter().map(|&i| v[i].abs()).sum();
                let theta = (mass - radius) / support.len() as f64;
                if support.iter().any(|&i| v[i].abs() - theta < 0.0) {
                    continue;
                }
                for &i in &support {
                    w[i] = v[i].signum() * (v[i].abs() - theta);
                }
            }
            if w.iter().map(|x| x.abs()).sum::<f64>() > radius + 1e-12 {
                continue;
            }
            let d = dist(&w);
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, w));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn l1_projection_matches_enumeration_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let dim = rng.gen_range(1..=6);
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let radius = rng.gen_range(0.0..3.0);
            let fast = project_l1_ball(&v, radius).unwrap();
            let oracle = enumerate_projection(&v, radius);
            for (a, b) in fast.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-4, "{v:?} r={radius}: {fast:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn entropy_examples() {
        let u = Posterior::uniform(10);
        assert!((entropy(&u, LogBase::Two) - 3.321928).abs() < 1e-5);
        assert_eq!(entropy(&ys_of(4, 1), LogBase::Two), 0.0);
        assert!((entropy(&post(&[0.5, 0.5]), LogBase::Two) - 1.0).abs() < 1e-12);
        assert!((entropy(&post(&[0.5, 0.5]), LogBase::E) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn distances() {
        let a = post(&[1.0, 0.0]);
        let b = post(&[0.0, 1.0]);
        assert_eq!(lp_dist(&a, &a, Norm::L1).unwrap(), 0.0);
        assert_eq!(lp_dist(&a, &b, Norm::L1).unwrap(), 2.0);
        assert!((lp_dist(&a, &b, Norm::L2).unwrap() - 1.414_213_562).abs() < 1e-9);
        assert!(lp_dist(&a, &Posterior::uniform(3), Norm::L1).is_err());
    }

    #[test]
    fn posterior_validation() {
        assert!(Posterior::new(vec![0.5, 0.6]).is_err());
        assert!(Posterior::new(vec![-0.1, 1.1]).is_err());
        assert!(Posterior::new(vec![f64::NAN, 1.0]).is_err());
        assert!(Posterior::new(vec![]).is_err());
        let p: Posterior = serde_json::from_str("[0.25,0.75]").unwrap();
        assert_eq!(p.argmax(), 1);
        assert!(serde_json::from_str::<Posterior>("[0.2,0.7]").is_err());
        assert_eq!(post(&[0.4, 0.4, 0.2]).argmax(), 0);
    }

    fn arb_posterior(k: usize) -> impl Strategy<Value = Posterior> {
        prop::collection::vec(0.0f64..1.0, k).prop_filter_map("zero mass", |v| {
            Posterior::normalized(v).ok()
        })
    }

    proptest! {
        #[test]
        fn interpolation_stays_on_simplex(
            (y, ys) in (2usize..8).prop_flat_map(|k| (arb_posterior(k), arb_posterior(k))),
            alpha in 0.0f64..=1.0,
        ) {
            let h = interpolate(&y, &ys, alpha).unwrap();
            prop_assert!(Posterior::new(h.into_vec()).is_ok());
        }

        #[test]
        fn opt_step_is_feasible_and_maximal(
            (y, ys) in (2usize..8).prop_flat_map(|k| (arb_posterior(k), arb_posterior(k))),
            eps in 0.0f64..=2.0,
            l2 in any::<bool>(),
        ) {
            let norm = if l2 { Norm::L2 } else { Norm::L1 };
            let eps = eps.min(norm.simplex_diameter());
            let budget = Budget::new(eps, norm).unwrap();
            let alpha = opt_step(&y, &ys, budget);
            prop_assert!((0.0..=1.0).contains(&alpha));
            let h = interpolate(&y, &ys, alpha).unwrap();
            prop_assert!(lp_dist(&h, &y, norm).unwrap() <= eps + 1e-9);
            let full = lp_dist(&y, &ys, norm).unwrap();
            if eps < full && alpha < 1.0 {
                let bigger = (alpha + 1e-6).min(1.0);
                let h2 = interpolate(&y, &ys, bigger).unwrap();
                prop_assert!(lp_dist(&h2, &y, norm).unwrap() > eps);
            }
        }

        #[test]
        fn l1_projection_is_idempotent_and_feasible(
            v in prop::collection::vec(-5.0f64..5.0, 1..12),
            radius in 0.0f64..4.0,
        ) {
            let once = project_l1_ball(&v, radius).unwrap();
            prop_assert!(once.iter().map(|x| x.abs()).sum::<f64>() <= radius + 1e-9);
            let twice = project_l1_ball(&once, radius).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
