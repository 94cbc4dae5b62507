use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Flat parameter vector in the canonical per-layer layout
/// (weight matrix row-major, then bias).
///
/// The vector does not carry its layout; consumers that need one
/// (e.g. [`crate::nn::NetworkSpec`]) check the length at their API boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

/// Gradients and parameter displacements share the parameter layout.
pub type GradVector = ParamVector;

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_len(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "{what}: lengths {} and {} differ",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        assert_eq!(self.len(), x.len(), "axpy length mismatch");
        for (a, b) in self.0.iter_mut().zip(&x.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|a| a * alpha).collect())
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "add length mismatch");
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "sub length mismatch");
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.0.iter().map(|a| a.abs()).sum()
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "max_abs_diff length mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Arithmetic mean of equally laid-out vectors.
    pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Shape("mean of zero vectors".into()))?;
        let mut acc = ParamVector::zeros(first.len());
        for v in vectors {
            acc.check_len(v, "mean")?;
            acc.axpy(1.0, v);
        }
        acc.scale(1.0 / vectors.len() as f64);
        Ok(acc)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axpy_and_norms() {
        let mut a = ParamVector::new(vec![1.0, -2.0]);
        a.axpy(2.0, &ParamVector::new(vec![0.5, 1.0]));
        assert_eq!(a.as_slice(), &[2.0, 0.0]);
        assert_eq!(ParamVector::new(vec![3.0, -4.0]).norm(), 5.0);
        assert_eq!(ParamVector::new(vec![3.0, -4.0]).norm_l1(), 7.0);
    }

    #[test]
    fn mean_rejects_mixed_lengths() {
        let v = [ParamVector::zeros(2), ParamVector::zeros(3)];
        assert!(ParamVector::mean(&v).is_err());
        assert!(ParamVector::mean(&[]).is_err());
    }
}
