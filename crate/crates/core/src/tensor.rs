use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Batches are stored with the sample index as the leading dimension, so a
/// set of `n` grayscale images is a tensor of shape `[n, 1, H, W]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::invalid(format!("zero dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor contains non-finite values"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    /// Stacks equally sized samples into a batch of shape `[n, sample_shape..]`.
    pub fn stack<'a>(
        sample_shape: &[usize],
        samples: impl IntoIterator<Item = &'a [f64]>,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        let mut data = Vec::new();
        let mut n = 0;
        for s in samples {
            if s.len() != per {
                return Err(Error::ShapeMismatch {
                    expected: sample_shape.to_vec(),
                    actual: vec![s.len()],
                });
            }
            data.extend_from_slice(s);
            n += 1;
        }
        let mut shape = vec![n];
        shape.extend_from_slice(sample_shape);
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Number of samples along the leading dimension.
    pub fn batch_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.sample_len();
        &self.data[i * per..(i + 1) * per]
    }

    /// Single sample `i` as its own tensor.
    pub fn sample_tensor(&self, i: usize) -> Tensor {
        Tensor {
            shape: self.sample_shape().to_vec(),
            data: self.sample(i).to_vec(),
        }
    }

    /// Gathers the given samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Tensor { shape, data }
    }

    /// Prepends a unit batch dimension.
    pub fn into_batch(mut self) -> Tensor {
        self.shape.insert(0, 1);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn batch_views() {
        let t = Tensor::new(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.batch_len(), 3);
        assert_eq!(t.sample(1), &[2., 3.]);
        let s = t.select(&[2, 0]);
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4., 5., 0., 1.]);
        let st = Tensor::stack(&[2], [t.sample(0), t.sample(2)]).unwrap();
        assert_eq!(st.data(), &[0., 1., 4., 5.]);
        assert_eq!(t.sample_tensor(2).into_batch().shape(), &[1, 2]);
    }
}
