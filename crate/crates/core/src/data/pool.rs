use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unlabeled inputs an attacker may submit as queries.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPool {
    pub inputs: Tensor,
    pub source_tag: String,
}

impl QueryPool {
    pub fn new(inputs: Tensor, source_tag: impl Into<String>) -> Self {
        QueryPool {
            inputs,
            source_tag: source_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.batch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hex SHA-256 over the shape and the exact bit patterns of the data.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.inputs.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.inputs.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySample {
    pub indices: Vec<usize>,
    pub with_replacement: bool,
}

/// Draws `budget` pool indices: distinct when the pool is large enough,
/// otherwise uniformly with replacement.
pub fn sample_queries(pool: &QueryPool, budget: usize, seed: u64) -> Result<QuerySample> {
    if pool.is_empty() {
        return Err(Error::invalid("query pool is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pool.len();
    if budget <= n {
        Ok(QuerySample {
            indices: index::sample(&mut rng, n, budget).into_vec(),
            with_replacement: false,
        })
    } else {
        Ok(QuerySample {
            indices: (0..budget).map(|_| rng.gen_range(0..n)).collect(),
            with_replacement: true,
        })
    }
}
