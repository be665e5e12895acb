//! Dense real vectors, norms and the componentwise signum.
//!
//! A [`DenseVector`] is never empty and never holds a NaN or infinity; every
//! constructor checks this, so the norms below are total functions.

use std::fmt;
use std::ops::Index;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct DenseVector {
    entries: Vec<f64>,
}

impl DenseVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("vector dimension must be at least 1"));
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry {} at index {i}",
                entries[i]
            )));
        }
        Ok(Self { entries })
    }

    pub fn from_slice(entries: &[f64]) -> Result<Self> {
        Self::new(entries.to_vec())
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "vector dimension must be at least 1");
        Self {
            entries: vec![0.0; dim],
        }
    }

    pub fn filled(dim: usize, value: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("vector dimension must be at least 1"));
        }
        Self::new(vec![value; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.entries.iter()
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_squared().sqrt()
    }

    pub fn l2_norm_squared(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    pub fn linf_norm(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &DenseVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn sign(&self) -> DenseVector {
        Self {
            entries: self.entries.iter().map(|&v| signum(v)).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&v| v == 0.0)
    }

    /// `self + scale * direction`, rejecting results that leave the finite range.
    pub fn add_scaled(&self, scale: f64, direction: &DenseVector) -> Result<DenseVector> {
        self.check_dim(direction)?;
        DenseVector::new(
            self.entries
                .iter()
                .zip(&direction.entries)
                .map(|(x, d)| x + scale * d)
                .collect(),
        )
    }

    pub fn sub(&self, other: &DenseVector) -> Result<DenseVector> {
        self.add_scaled(-1.0, other)
    }

    pub fn scale(&self, factor: f64) -> Result<DenseVector> {
        DenseVector::new(self.entries.iter().map(|v| v * factor).collect())
    }

    pub fn check_dim(&self, other: &DenseVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    pub fn expect_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.dim(),
            });
        }
        Ok(())
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.entries[i]
    }
}

impl fmt::Debug for DenseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.entries).finish()
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        DenseVector::new(v)
    }
}

/// Mathematical signum with `sign(0) = 0`.
#[inline]
pub fn signum(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Componentwise signum. Entries of the result are in {-1, 0, +1}.
pub fn sign_vec(v: &DenseVector) -> Result<DenseVector> {
    Ok(v.sign())
}

/// Componentwise signum over a raw slice; rejects NaN and infinities.
pub fn sign_of_slice(v: &[f64]) -> Result<DenseVector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("sign of a non-finite entry"));
    }
    DenseVector::new(v.iter().map(|&x| signum(x)).collect())
}

pub fn l1_norm(v: &DenseVector) -> f64 {
    v.l1_norm()
}

pub fn linf_norm(v: &DenseVector) -> f64 {
    v.linf_norm()
}

pub fn l2_norm(v: &DenseVector) -> f64 {
    v.l2_norm()
}
