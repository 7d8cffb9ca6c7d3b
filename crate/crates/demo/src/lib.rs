//! Browser demo: a K=3 MAD explorer, a baseline comparison and a small
//! angular-deviation experiment, all on synthetic models.

use mad_core::data::synth_blobs;
use mad_core::defense::{mad_objective, DefenseKind, DefensePolicy, Gram, JacobianMatrix};
use mad_core::harness::{run_angular_experiment, AngularConfig};
use mad_core::nn::{build, sgd_train, Model, TrainConfig};
use mad_core::simplex::{entropy, extremes, lp_dist, LogBase, Norm, Posterior};
use mad_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const DIM: usize = 8;

/// Jacobian of a seeded random MLP at a seeded random input.
fn demo_jacobian(seed: u64) -> mad_core::Result<JacobianMatrix> {
    let model = build("mlp", &[DIM], 3, None, seed)?;
    let x: Vec<f64> = (0..DIM).map(|i| ((seed as usize + 7 * i) % 11) as f64 / 11.0).collect();
    model.loglik_jacobian(&Tensor::new(vec![DIM], x)?)
}

fn posterior(y: &[f64]) -> mad_core::Result<Posterior> {
    Posterior::normalized(y.iter().map(|v| v.max(0.0)).collect())
}

#[derive(Serialize)]
struct Vertex {
    vertex: Vec<f64>,
    objective: f64,
}

#[derive(Serialize)]
struct Explore {
    y: Vec<f64>,
    y_tilde: Vec<f64>,
    y_star: Option<usize>,
    alpha: f64,
    l1: f64,
    objective: f64,
    vertices: Vec<Vertex>,
}

pub fn explore(y: &[f64], epsilon: f64, seed: u64, argmax: bool) -> mad_core::Result<String> {
    let y = posterior(y)?;
    let g = demo_jacobian(seed)?;
    let gram = Gram::from_jacobian(&g);
    let kind = if argmax { DefenseKind::MadArgmax } else { DefenseKind::Mad };
    let policy = DefensePolicy::with_epsilon(kind, epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = policy.apply(&y, Some(&gram), &mut rng)?;
    let vertices = extremes(3)?
        .map(|v| {
            let objective = mad_objective(&v, &y, &g).unwrap_or(0.0);
            Vertex {
                vertex: v.into_vec(),
                objective,
            }
        })
        .collect();
    let out = Explore {
        l1: lp_dist(&p.posterior, &y, Norm::L1)?,
        objective: mad_objective(&p.posterior, &y, &g).unwrap_or(0.0),
        y_tilde: p.posterior.into_vec(),
        y: y.into_vec(),
        y_star: p.y_star,
        alpha: p.alpha,
        vertices,
    };
    Ok(serde_json::to_string(&out)?)
}

#[derive(Serialize)]
struct Row {
    defense: String,
    posterior: Vec<f64>,
    l1: f64,
    entropy_bits: f64,
    argmax_kept: bool,
}

pub fn compare(y: &[f64], epsilon: f64, seed: u64) -> mad_core::Result<String> {
    let y = posterior(y)?;
    let gram = Gram::from_jacobian(&demo_jacobian(seed)?);
    let policies = [
        DefensePolicy::mad(epsilon),
        DefensePolicy::mad_argmax(epsilon),
        DefensePolicy::with_epsilon(DefenseKind::MadIdentityG, epsilon),
        DefensePolicy::with_epsilon(DefenseKind::MadRandYStar, epsilon),
        DefensePolicy::reverse_sigmoid((epsilon / 2.0).min(1.0), 0.2),
        DefensePolicy::rand_noise(epsilon),
        DefensePolicy::rounding(1),
        DefensePolicy::topk(1),
    ];
    let mut rows = Vec::new();
    for policy in policies {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = policy.apply(&y, Some(&gram), &mut rng)?.posterior;
        rows.push(Row {
            defense: policy.tag(),
            l1: lp_dist(&p, &y, Norm::L1)?,
            entropy_bits: entropy(&p, LogBase::Two),
            argmax_kept: p.argmax() == y.argmax(),
            posterior: p.into_vec(),
        });
    }
    Ok(serde_json::to_string(&rows)?)
}

fn demo_victim() -> mad_core::Result<(Model, mad_core::data::LabeledDataset)> {
    let data = synth_blobs(3, 60, DIM, 0.12, 5)?;
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 16,
        ..TrainConfig::default()
    };
    Ok((sgd_train(build("mlp", &[DIM], 3, None, 1)?, &data, &cfg)?, data))
}

pub fn angular(epsilon: f64, steps: usize, seed: u64, argmax: bool) -> mad_core::Result<String> {
    let (victim, data) = demo_victim()?;
    let kind = if argmax { DefenseKind::MadArgmax } else { DefenseKind::Mad };
    let cfg = AngularConfig {
        steps: steps.clamp(1, 5000),
        lr: 0.01,
        seed,
        ..AngularConfig::default()
    };
    let h = run_angular_experiment(&victim, &data.inputs, &data, &DefensePolicy::with_epsilon(kind, epsilon), None, &cfg)?;
    Ok(serde_json::to_string(&h)?)
}

fn js(r: mad_core::Result<String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// MAD (or MAD-argmax) answer for a 3-class posterior.
#[wasm_bindgen]
pub fn mad_explore(y0: f64, y1: f64, y2: f64, epsilon: f64, seed: u32, argmax: bool) -> Result<String, JsError> {
    js(explore(&[y0, y1, y2], epsilon, seed as u64, argmax))
}

/// Every defense applied to the same posterior.
#[wasm_bindgen]
pub fn compare_defenses(y0: f64, y1: f64, y2: f64, epsilon: f64, seed: u32) -> Result<String, JsError> {
    js(compare(&[y0, y1, y2], epsilon, seed as u64))
}

/// Angular-deviation histogram of a white-box online-SGD run.
#[wasm_bindgen]
pub fn angular_demo(epsilon: f64, steps: u32, seed: u32, argmax: bool) -> Result<String, JsError> {
    js(angular(epsilon, steps as usize, seed as u64, argmax))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explore_respects_budget() {
        let v: serde_json::Value = serde_json::from_str(&explore(&[0.6, 0.3, 0.1], 0.4, 2, false).unwrap()).unwrap();
        assert!(v["l1"].as_f64().unwrap() <= 0.4 + 1e-9);
        assert_eq!(v["vertices"].as_array().unwrap().len(), 3);
        let a: serde_json::Value = serde_json::from_str(&explore(&[0.6, 0.3, 0.1], 2.0, 2, true).unwrap()).unwrap();
        let yt: Vec<f64> = serde_json::from_value(a["y_tilde"].clone()).unwrap();
        assert_eq!(mad_core::simplex::argmax(&yt), 0);
    }

    #[test]
    fn compare_lists_all_defenses() {
        let rows: Vec<serde_json::Value> = serde_json::from_str(&compare(&[0.5, 0.3, 0.2], 0.5, 1).unwrap()).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r["l1"].as_f64().unwrap() <= 2.0));
    }

    #[test]
    fn angular_runs() {
        let h: serde_json::Value = serde_json::from_str(&angular(0.0, 20, 0, false).unwrap()).unwrap();
        assert_eq!(h["mean_theta"].as_f64().unwrap(), 0.0);
    }
}
