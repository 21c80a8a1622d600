//! Frames and chunks: fixed-dimension real vectors and their temporal sequences.
//!
//! Pixel frames and latent frames share one representation; the aliases in the
//! crate root only document which space a value lives in.

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// A single real vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    values: Vec<T>,
}

impl<T: Scalar> Frame<T> {
    /// Builds a frame, rejecting empty or non-finite input.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("frame dimension must be at least 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: "Frame::new",
                step: None,
                detail: format!("non-finite entry at coordinate {i}"),
            });
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![T::zero(); dim],
        }
    }

    pub(crate) fn from_vec_unchecked(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.is_zero())
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::count(self.values.len())
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dim("Frame::sub", self.dim(), other.dim())?;
        Ok(Self::from_vec_unchecked(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| *a - *b)
                .collect(),
        ))
    }

    pub fn cast<U: Scalar>(&self) -> Frame<U> {
        Frame::from_vec_unchecked(self.values.iter().map(|v| U::of(v.as_f64())).collect())
    }
}

/// An ordered sequence of frames sharing one dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> Chunk<T> {
    pub fn zeros(len: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![T::zero(); len * dim],
        }
    }

    /// Builds a chunk from flat row-major data.
    pub fn from_flat(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("chunk dimension must be at least 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension {
                context: "Chunk::from_flat",
                expected: (data.len() / dim + 1) * dim,
                found: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_frames(frames: &[Frame<T>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Domain("chunk must contain at least one frame".into()))?;
        let dim = first.dim();
        let mut data = Vec::with_capacity(frames.len() * dim);
        for f in frames {
            check_dim("Chunk::from_frames", dim, f.dim())?;
            data.extend_from_slice(f.values());
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn frame(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [T] {
        let d = self.dim;
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_frames(&self) -> Vec<Frame<T>> {
        self.frames()
            .map(|f| Frame::from_vec_unchecked(f.to_vec()))
            .collect()
    }

    pub fn frame_owned(&self, i: usize) -> Frame<T> {
        Frame::from_vec_unchecked(self.frame(i).to_vec())
    }

    /// Frames `start..end`, as a new chunk.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dim == other.dim && self.data.len() == other.data.len()
    }

    pub(crate) fn check_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        check_dim(context, self.dim, other.dim)?;
        check_dim(context, self.len(), other.len())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise combination of two equally shaped chunks.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_shape(other, "Chunk::zip_map")?;
        Ok(Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.check_shape(other, "Chunk::axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * *b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_shape(other, "Chunk::dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| *a * *b).sum())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn mean_square(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().map(|v| *v * *v).sum::<T>() / T::count(self.data.len())
    }

    /// Appends the frames of `other` after those of `self`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        check_dim("Chunk::concat", self.dim, other.dim)?;
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            dim: self.dim,
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Chunk<U> {
        Chunk {
            dim: self.dim,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_rejects_non_finite() {
        assert!(Frame::new(vec![1.0, f64::NAN]).is_err());
        assert!(Frame::<f64>::new(vec![]).is_err());
        assert!(Frame::new(vec![1.0f32]).is_ok());
    }

    #[test]
    fn chunk_layout_is_row_major() {
        let c = Chunk::from_flat(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.frame(1), &[3.0, 4.0]);
        assert_eq!(c.slice(1, 3).as_slice(), &[3.0, 4.0, 5.0, 6.0]);
        assert!(Chunk::from_flat(4, vec![1.0; 6]).is_err());
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let a = Chunk::<f64>::zeros(2, 3);
        let b = Chunk::<f64>::zeros(3, 2);
        assert!(matches!(a.add(&b), Err(Error::Dimension { .. })));
    }
}
