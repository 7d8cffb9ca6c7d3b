use rand::Rng;

use super::{AttackConfig, Subversion};
use crate::data::Audit;
use crate::defense::{Answer, DefendedEndpoint};
use crate::error::{Error, Result};
use crate::simplex::Posterior;
use crate::tensor::Tensor;

const PAD: usize = 4;
/// Distinct inputs sent to the endpoint per call.
const CHUNK: usize = 512;

/// Random crop after zero-padding by 4 pixels, then a horizontal flip with
/// probability ½. `x` is one `[C, H, W]` image.
pub fn augment<R: Rng + ?Sized>(x: &[f64], shape: &[usize], rng: &mut R) -> Result<Vec<f64>> {
    let &[c, h, w] = shape else {
        return Err(Error::invalid(format!("augmentation needs [C, H, W] inputs, got {shape:?}")));
    };
    if x.len() != c * h * w {
        return Err(Error::LengthMismatch {
            left: c * h * w,
            right: x.len(),
        });
    }
    let dy = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
    let dx = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
    let flip = rng.gen_bool(0.5);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for i in 0..h {
            let si = i as isize + dy;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let jj = if flip { w - 1 - j } else { j };
                let sj = jj as isize + dx;
                if sj < 0 || sj >= w as isize {
                    continue;
                }
                out[(ch * h + i) * w + j] = x[(ch * h + si as usize) * w + sj as usize];
            }
        }
    }
    Ok(out)
}

/// Queries every sample of `xs` through the endpoint, spending
/// `cfg.queries_per_input()` queries on each and averaging the answers.
pub fn collect_answers<R: Rng + ?Sized>(
    endpoint: &DefendedEndpoint,
    xs: &Tensor,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Vec<(Posterior, Audit)>> {
    let n = cfg.queries_per_input();
    let aug = cfg
        .subversions
        .iter()
        .any(|s| matches!(s, Subversion::NqueryAug { .. }));
    let shape = xs.sample_shape().to_vec();
    let mut out = Vec::with_capacity(xs.batch_len());
    let mut start = 0;
    while start < xs.batch_len() {
        let end = (start + CHUNK).min(xs.batch_len());
        let mut rows = Vec::with_capacity((end - start) * n);
        for i in start..end {
            for _ in 0..n {
                rows.push(if aug {
                    augment(xs.sample(i), &shape, rng)?
                } else {
                    xs.sample(i).to_vec()
                });
            }
        }
        let batch = Tensor::stack(&shape, rows.iter().map(Vec::as_slice))?;
        let answers = endpoint.query_batch(&batch)?;
        out.extend(average_groups(answers, n)?);
        start = end;
    }
    Ok(out)
}

/// Averages consecutive groups of `n` answers (posteriors and audit L1).
pub(crate) fn average_groups(answers: Vec<Answer>, n: usize) -> Result<Vec<(Posterior, Audit)>> {
    if n == 1 {
        return Ok(answers.into_iter().map(|a| (a.posterior, a.audit)).collect());
    }
    answers
        .chunks(n)
        .map(|group| {
            let k = group[0].posterior.num_classes();
            let mut mean = vec![0.0; k];
            for a in group {
                for (m, p) in mean.iter_mut().zip(a.posterior.probs()) {
                    *m += p / n as f64;
                }
            }
            let l1 = group.iter().map(|a| a.audit.l1).sum::<f64>() / n as f64;
            Ok((
                Posterior::normalized(mean)?,
                Audit {
                    l1,
                    y_star: group[0].audit.y_star,
                },
            ))
        })
        .collect()
}
