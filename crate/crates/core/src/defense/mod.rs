//! Prediction-perturbation defenses.

mod baselines;
mod endpoint;
mod mad;
mod surrogate;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use baselines::{rand_noise_perturb, reverse_sigmoid_perturb, rounding_perturb, topk_perturb};
pub use endpoint::{prepare_queries, Answer, DefendedEndpoint, PreparedQuery};
pub use mad::{mad_ablation_perturb, mad_objective, mad_perturb, mad_perturb_gram, AblationVariant, Gram};
pub use surrogate::{estimate_g, InitMode, SurrogateSpec};

pub use crate::nn::{GradientVector, JacobianMatrix};
use crate::error::{Error, Result};
use crate::simplex::{Budget, Posterior};

/// Result of perturbing one posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub posterior: Posterior,
    /// Class the perturbation moved toward, for the MAD family.
    pub y_star: Option<usize>,
    /// Interpolation step, for the MAD family.
    pub alpha: f64,
}

impl Perturbation {
    pub fn unchanged(y: &Posterior) -> Self {
        Perturbation {
            posterior: y.clone(),
            y_star: None,
            alpha: 0.0,
        }
    }

    fn plain(posterior: Posterior) -> Self {
        Perturbation {
            posterior,
            y_star: None,
            alpha: 0.0,
        }
    }
}

/// Angle in degrees between two gradient vectors.
pub fn angular_deviation(u: &GradientVector, a: &GradientVector) -> Result<f64> {
    if u.len() != a.len() {
        return Err(Error::LengthMismatch {
            left: u.len(),
            right: a.len(),
        });
    }
    let (nu, na) = (u.norm(), a.norm());
    if nu == 0.0 || na == 0.0 || !nu.is_finite() || !na.is_finite() {
        return Err(Error::UndefinedAngle);
    }
    if u.values() == a.values() {
        return Ok(0.0);
    }
    let cos = (u.dot(a) / (nu * na)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DefenseKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "mad")]
    Mad,
    #[serde(rename = "mad_argmax")]
    MadArgmax,
    #[serde(rename = "mad_identity_G", alias = "mad_identity_g")]
    MadIdentityG,
    #[serde(rename = "mad_rand_ystar")]
    MadRandYStar,
    #[serde(rename = "reverse_sigmoid")]
    ReverseSigmoid,
    #[serde(rename = "rand_noise")]
    RandNoise,
    #[serde(rename = "rounding")]
    Rounding,
    #[serde(rename = "topk")]
    Topk,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Mad => "mad",
            DefenseKind::MadArgmax => "mad_argmax",
            DefenseKind::MadIdentityG => "mad_identity_G",
            DefenseKind::MadRandYStar => "mad_rand_ystar",
            DefenseKind::ReverseSigmoid => "reverse_sigmoid",
            DefenseKind::RandNoise => "rand_noise",
            DefenseKind::Rounding => "rounding",
            DefenseKind::Topk => "topk",
        }
    }

    /// Whether the policy needs the surrogate's Jacobian for every query.
    pub fn needs_jacobian(self) -> bool {
        matches!(self, DefenseKind::Mad | DefenseKind::MadArgmax)
    }

    pub fn uses_epsilon(self) -> bool {
        matches!(
            self,
            DefenseKind::Mad
                | DefenseKind::MadArgmax
                | DefenseKind::MadIdentityG
                | DefenseKind::MadRandYStar
                | DefenseKind::RandNoise
        )
    }
}

/// Configuration of one defense, as it appears in experiment configs.
///
/// Only the fields relevant to `kind` are read; [`DefensePolicy::validate`]
/// checks they are present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefensePolicy {
    pub kind: DefenseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decimals: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<SurrogateSpec>,
}

impl DefensePolicy {
    fn of(kind: DefenseKind) -> Self {
        DefensePolicy {
            kind,
            epsilon: None,
            beta: None,
            gamma: None,
            decimals: None,
            k: None,
            surrogate: None,
        }
    }

    pub fn none() -> Self {
        Self::of(DefenseKind::None)
    }

    /// A budgeted policy (`mad*` or `rand_noise`).
    pub fn with_epsilon(kind: DefenseKind, epsilon: f64) -> Self {
        DefensePolicy {
            epsilon: Some(epsilon),
            ..Self::of(kind)
        }
    }

    pub fn mad(epsilon: f64) -> Self {
        Self::with_epsilon(DefenseKind::Mad, epsilon)
    }

    pub fn mad_argmax(epsilon: f64) -> Self {
        Self::with_epsilon(DefenseKind::MadArgmax, epsilon)
    }

    pub fn reverse_sigmoid(beta: f64, gamma: f64) -> Self {
        DefensePolicy {
            beta: Some(beta),
            gamma: Some(gamma),
            ..Self::of(DefenseKind::ReverseSigmoid)
        }
    }

    pub fn rand_noise(epsilon: f64) -> Self {
        Self::with_epsilon(DefenseKind::RandNoise, epsilon)
    }

    pub fn rounding(decimals: u32) -> Self {
        DefensePolicy {
            decimals: Some(decimals),
            ..Self::of(DefenseKind::Rounding)
        }
    }

    pub fn topk(k: usize) -> Self {
        DefensePolicy {
            k: Some(k),
            ..Self::of(DefenseKind::Topk)
        }
    }

    pub fn with_surrogate(mut self, spec: SurrogateSpec) -> Self {
        self.surrogate = Some(spec);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let missing = |field: &str| {
            Error::invalid(format!("defense {} requires `{field}`", self.kind.name()))
        };
        if self.kind.uses_epsilon() {
            let eps = self.epsilon.ok_or_else(|| missing("epsilon"))?;
            if !(0.0..=2.0).contains(&eps) {
                return Err(Error::invalid(format!("epsilon {eps} outside [0, 2]")));
            }
        }
        match self.kind {
            DefenseKind::ReverseSigmoid => {
                let beta = self.beta.ok_or_else(|| missing("beta"))?;
                let gamma = self.gamma.ok_or_else(|| missing("gamma"))?;
                if !(0.0..=1.0).contains(&beta) || !(gamma > 0.0) {
                    return Err(Error::invalid("reverse_sigmoid needs beta in [0, 1] and gamma > 0"));
                }
            }
            DefenseKind::Rounding => {
                self.decimals.ok_or_else(|| missing("decimals"))?;
            }
            DefenseKind::Topk => {
                if self.k.ok_or_else(|| missing("k"))? == 0 {
                    return Err(Error::invalid("topk needs k ≥ 1"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Short label such as `mad(eps=0.5)`, used in tables and file names.
    pub fn tag(&self) -> String {
        let name = self.kind.name();
        match self.kind {
            DefenseKind::None => name.into(),
            DefenseKind::ReverseSigmoid => format!(
                "{name}(beta={},gamma={})",
                self.beta.unwrap_or(f64::NAN),
                self.gamma.unwrap_or(f64::NAN)
            ),
            DefenseKind::Rounding => format!("{name}(decimals={})", self.decimals.unwrap_or(0)),
            DefenseKind::Topk => format!("{name}(k={})", self.k.unwrap_or(0)),
            _ => format!("{name}(eps={})", self.epsilon.unwrap_or(f64::NAN)),
        }
    }

    fn budget(&self) -> Result<Budget> {
        Budget::l1(self.epsilon.unwrap_or(0.0))
    }

    /// Applies the policy to one victim posterior. `gram` must be present
    /// for the kinds that need a Jacobian.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        y: &Posterior,
        gram: Option<&Gram>,
        rng: &mut R,
    ) -> Result<Perturbation> {
        match self.kind {
            DefenseKind::None => Ok(Perturbation::unchanged(y)),
            DefenseKind::Mad | DefenseKind::MadArgmax => {
                let gram = gram.ok_or_else(|| {
                    Error::invalid(format!("{} needs a surrogate Jacobian", self.kind.name()))
                })?;
                mad_perturb_gram(y, gram, self.budget()?, self.kind == DefenseKind::MadArgmax)
            }
            DefenseKind::MadIdentityG => {
                mad_ablation_perturb(y, self.budget()?, AblationVariant::IdentityG, rng)
            }
            DefenseKind::MadRandYStar => {
                mad_ablation_perturb(y, self.budget()?, AblationVariant::RandYStar, rng)
            }
            DefenseKind::ReverseSigmoid => reverse_sigmoid_perturb(
                y,
                self.beta.unwrap_or(0.0),
                self.gamma.unwrap_or(1.0),
            )
            .map(Perturbation::plain),
            DefenseKind::RandNoise => {
                rand_noise_perturb(y, self.epsilon.unwrap_or(0.0), rng).map(Perturbation::plain)
            }
            DefenseKind::Rounding => {
                rounding_perturb(y, self.decimals.unwrap_or(0)).map(Perturbation::plain)
            }
            DefenseKind::Topk => topk_perturb(y, self.k.unwrap_or(1)).map(Perturbation::plain),
        }
    }
}
