//! Versioned on-disk container for the (query, answer) pairs an attacker
//! collects.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::QueryPool;
use crate::error::{Error, Result};
use crate::simplex::Posterior;
use crate::tensor::Tensor;

const FORMAT: &str = "mad-transfer";
pub const TRANSFER_VERSION: u32 = 1;

/// Where a query input came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputRef {
    /// Row of the pool identified by [`TransferSet::pool`].
    Pool { index: usize },
    /// Synthesized input stored verbatim.
    Inline { data: Vec<f64> },
}

/// Defender-side bookkeeping, kept for analysis only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub l1: f64,
    #[serde(default)]
    pub y_star: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub input: InputRef,
    pub posterior: Posterior,
    pub epsilon_used: f64,
    pub defense_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<Audit>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolRef {
    pub tag: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSet {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub pool: Option<PoolRef>,
    pub records: Vec<TransferRecord>,
    /// Free-form description of the attack that produced the set.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl TransferSet {
    pub fn new(input_shape: Vec<usize>, pool: Option<&QueryPool>) -> Self {
        TransferSet {
            format: FORMAT.into(),
            version: TRANSFER_VERSION,
            input_shape,
            pool: pool.map(|p| PoolRef {
                tag: p.source_tag.clone(),
                hash: p.content_hash(),
            }),
            records: Vec::new(),
            provenance: serde_json::Value::Null,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: TransferRecord) {
        self.records.push(record);
    }

    /// Resolves every input into a `[n, ...input_shape]` tensor.
    ///
    /// Pool references require the same pool (checked by content hash).
    pub fn materialize(&self, pool: Option<&QueryPool>) -> Result<Tensor> {
        let sample_len: usize = self.input_shape.iter().product();
        let needs_pool = self
            .records
            .iter()
            .any(|r| matches!(r.input, InputRef::Pool { .. }));
        let pool = match (needs_pool, pool, &self.pool) {
            (false, _, _) => None,
            (true, Some(p), Some(r)) if p.content_hash() == r.hash => Some(p),
            (true, Some(_), Some(_)) => {
                return Err(Error::invalid("query pool content does not match the transfer set"))
            }
            _ => return Err(Error::invalid("transfer set references a pool that was not supplied")),
        };
        let mut data = Vec::with_capacity(self.len() * sample_len);
        for r in &self.records {
            match &r.input {
                InputRef::Pool { index } => {
                    let p = pool.expect("checked above");
                    if *index >= p.len() {
                        return Err(Error::invalid(format!("pool index {index} out of range")));
                    }
                    data.extend_from_slice(p.inputs.sample(*index));
                }
                InputRef::Inline { data: d } => {
                    if d.len() != sample_len {
                        return Err(Error::LengthMismatch {
                            left: sample_len,
                            right: d.len(),
                        });
                    }
                    data.extend_from_slice(d);
                }
            }
        }
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.input_shape);
        Tensor::new(shape, data)
    }

    /// Row-major `n × K` matrix of the recorded posteriors.
    pub fn targets(&self) -> Vec<f64> {
        self.records
            .iter()
            .flat_map(|r| r.posterior.probs().iter().copied())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: TransferSet = serde_json::from_str(s)?;
        if set.format != FORMAT {
            return Err(Error::invalid(format!("not a transfer set (format {:?})", set.format)));
        }
        if set.version != TRANSFER_VERSION {
            return Err(Error::VersionMismatch {
                found: set.version,
                expected: TRANSFER_VERSION,
            });
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> (TransferSet, QueryPool) {
        let pool = QueryPool::new(
            Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            "unit",
        );
        let mut set = TransferSet::new(vec![2], Some(&pool));
        set.push(TransferRecord {
            input: InputRef::Pool { index: 2 },
            posterior: Posterior::new(vec![0.1, 0.2, 0.7]).unwrap(),
            epsilon_used: 0.3,
            defense_tag: "mad".into(),
            audit: Some(Audit {
                l1: 0.3,
                y_star: Some(1),
            }),
        });
        set.push(TransferRecord {
            input: InputRef::Inline {
                data: vec![1.0 / 3.0, 0.9],
            },
            posterior: Posterior::new(vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap(),
            epsilon_used: 0.0,
            defense_tag: "none".into(),
            audit: None,
        });
        (set, pool)
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (set, pool) = sample_set();
        let back = TransferSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
        let x = back.materialize(Some(&pool)).unwrap();
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.data(), &[0.5, 0.6, 1.0 / 3.0, 0.9]);
        assert_eq!(back.targets().len(), 6);
    }

    #[test]
    fn rejects_wrong_version_and_pool() {
        let (mut set, pool) = sample_set();
        set.version = 9;
        let s = serde_json::to_string(&set).unwrap();
        assert!(matches!(
            TransferSet::from_json(&s),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        set.version = TRANSFER_VERSION;
        assert!(set.materialize(None).is_err());
        let mut other = pool.clone();
        other.inputs.data_mut()[0] = 0.0;
        assert!(set.materialize(Some(&other)).is_err());
    }
}
