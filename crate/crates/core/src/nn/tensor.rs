use serde::{Deserialize, Serialize};

use super::{NnError, Result};
use crate::scalar::Real;

/// Dense row-major buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBuf<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> TensorBuf<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape {
                context: "TensorBuf::from_vec",
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// A single-row matrix.
    pub fn row_vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a matrix.
    #[inline]
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Trailing dimension of a matrix.
    #[inline]
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn hcat(parts: &[&TensorBuf<T>]) -> Result<Self> {
        let rows = parts.first().map(|p| p.rows()).unwrap_or(0);
        if let Some(bad) = parts.iter().find(|p| p.rows() != rows) {
            return Err(NnError::Shape {
                context: "hcat",
                expected: vec![rows],
                got: vec![bad.rows()],
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Splits columns into consecutive blocks of the given widths.
    pub fn hsplit(&self, widths: &[usize]) -> Vec<Self> {
        let rows = self.rows();
        let mut out: Vec<Self> = widths.iter().map(|&w| Self::zeros(&[rows, w])).collect();
        for r in 0..rows {
            let src = self.row(r);
            let mut off = 0;
            for (o, &w) in out.iter_mut().zip(widths) {
                o.row_mut(r).copy_from_slice(&src[off..off + w]);
                off += w;
            }
        }
        out
    }

    pub(crate) fn check_finite(&self, context: &'static str) -> Result<()> {
        if cfg!(debug_assertions) && !self.all_finite() {
            return Err(NnError::NonFinite(context));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(TensorBuf::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = TensorBuf::<f64>::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn hcat_then_hsplit_is_identity() {
        let a = TensorBuf::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = TensorBuf::<f64>::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = TensorBuf::hcat(&[&a, &b]).unwrap();
        assert_eq!(c.data, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let parts = c.hsplit(&[2, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
