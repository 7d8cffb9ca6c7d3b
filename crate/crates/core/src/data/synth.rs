use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian clusters around seeded random centers.
///
/// Centers are drawn from `U(0.2, 0.8)^dim`; each point is its class center
/// plus `N(0, spread²)` noise, clipped to `[0, 1]` so the samples are valid
/// "pixel" inputs. Samples are ordered class by class.
pub fn synth_blobs(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || dim < 2 {
        return Err(Error::invalid(format!(
            "need K ≥ 2 and dim ≥ 2, got K={num_classes}, dim={dim}"
        )));
    }
    if n_per_class == 0 || !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::invalid("need n_per_class ≥ 1 and a finite spread ≥ 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();
    let noise = Normal::new(0.0, spread).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(num_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(
                center
                    .iter()
                    .map(|c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0)),
            );
            labels.push(class);
        }
    }
    let inputs = Tensor::new(vec![labels.len(), dim], data)?;
    LabeledDataset::new(inputs, labels, num_classes, Split::Train)
}
