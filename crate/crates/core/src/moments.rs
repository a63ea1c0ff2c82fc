//! Single-pass running mean and covariance.

use nalgebra::{DMatrix, DVector};

/// Welford-style running moments of a vector-valued sequence.
#[derive(Debug, Clone)]
pub struct RunningMoments {
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl RunningMoments {
    pub fn new(dimension: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dimension),
            scatter: DMatrix::zeros(dimension, dimension),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        let delta = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        self.mean += &delta / n;
        let delta2 = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        // scatter += delta * delta2^T, symmetric by construction up to rounding
        self.scatter.ger(1.0, &delta, &delta2, 1.0);
    }

    /// Unbiased sample covariance, or `None` with fewer than two points.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        if self.count < 2 {
            return None;
        }
        let c = &self.scatter / (self.count as f64 - 1.0);
        Some((&c + c.transpose()) * 0.5)
    }
}

/// Unbiased sample covariance of the rows of `rows`.
pub fn sample_covariance<'a, I>(rows: I, dimension: usize) -> Option<DMatrix<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut m = RunningMoments::new(dimension);
    for r in rows {
        m.push(r);
    }
    m.covariance()
}
