use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::defense::DefendedEndpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub defense_tag: String,
    pub n_queries: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Wall-clock latency of single queries, cycling through `xs`.
pub fn timing_report(endpoint: &DefendedEndpoint, xs: &Tensor, n_queries: usize) -> Result<TimingStats> {
    if xs.batch_len() == 0 || n_queries == 0 {
        return Err(Error::invalid("need at least one input and one query"));
    }
    let mut ms = Vec::with_capacity(n_queries);
    for i in 0..n_queries {
        let x = xs.sample_tensor(i % xs.batch_len());
        let t = Instant::now();
        endpoint.query(&x)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    let var = ms.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / ms.len() as f64;
    Ok(TimingStats {
        defense_tag: endpoint.policy().tag(),
        n_queries,
        mean_ms: mean,
        std_ms: var.sqrt(),
    })
}
