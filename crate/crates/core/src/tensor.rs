//! Dense `f64` tensors with an explicit shape.
//!
//! Images use the `[height, width, channels]` layout with channels
//! interleaved, matching PGM/PPM pixel order. Everything else in the crate
//! treats a tensor as a flat vector together with the shape it came from.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShapeError {
    #[error("shape {shape:?} holds {expected} elements but {got} were supplied")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Mismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self, ShapeError> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ShapeError::Length {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor wrapping `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Same data under a different shape with the same element count.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self, ShapeError> {
        Self::new(shape, self.data)
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<(), ShapeError> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(ShapeError::Mismatch {
                expected: shape.to_vec(),
                got: self.shape.clone(),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    ///
    /// Panics on shape mismatch; callers validate shapes at API boundaries.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Tensor, b: f64) -> Self {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    /// `‖self − other‖ / ‖other‖`, or the absolute distance when `other` is zero.
    pub fn rel_err(&self, other: &Tensor) -> f64 {
        let d = self.sub(other).norm();
        let n = other.norm();
        if n == 0.0 {
            d
        } else {
            d / n
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, ShapeError::Length { expected: 6, got: 5, .. }));
    }

    #[test]
    fn lincomb_and_norms() {
        let a = Tensor::from_vec(vec![3.0, 0.0]);
        let b = Tensor::from_vec(vec![0.0, 4.0]);
        let c = a.lincomb(1.0, &b, 1.0);
        assert_eq!(c.norm(), 5.0);
        assert_eq!(c.max_abs(), 4.0);
        assert_eq!(a.dot(&b), 0.0);
    }

    #[test]
    fn expect_shape_reports_both_sides() {
        let t = Tensor::zeros(vec![4, 4, 1]);
        assert!(t.expect_shape(&[4, 4, 1]).is_ok());
        let err = t.expect_shape(&[4, 4, 3]).unwrap_err();
        assert_eq!(
            err,
            ShapeError::Mismatch {
                expected: vec![4, 4, 3],
                got: vec![4, 4, 1]
            }
        );
    }
}
