//! Dense real-valued tensors.
//!
//! A [`Tensor`] is a row-major array of `f64` values with an explicit shape.
//! Rank-3 tensors are channel-major `(C, H, W)` feature maps; rank-1 tensors
//! carry flat vectors (logits, features, per-channel parameters). All values
//! are finite by construction and every operation in the crate preserves
//! finiteness.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Tensor of zeros with the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Tensor filled with a constant.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        debug_assert!(value.is_finite());
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Build from a shape and row-major data, validating length and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{} values for shape {:?}", expected, shape),
                format!("{} values", data.len()),
            ));
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "Tensor::from_vec".to_string(),
                    index: i,
                    value: v,
                });
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-1 tensor from a flat vector.
    pub fn rank1(data: Vec<f64>) -> Result<Self> {
        let shape = vec![data.len()];
        Tensor::from_vec(shape, data)
    }

    /// Internal constructor that skips the finiteness scan in release builds.
    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor value");
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Dimensions of a rank-3 `(C, H, W)` tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::shape(
                "Tensor::dims3",
                "rank-3 tensor",
                format!("rank-{} shape {:?}", self.shape.len(), self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Element at `(c, h, w)` of a rank-3 tensor. Callers hold the dims.
    #[inline]
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        let (_, hd, wd) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * hd + h) * wd + w]
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// `self += a * x`, shapes must agree.
    pub fn axpy(&mut self, a: f64, x: &Tensor) -> Result<()> {
        if self.shape != x.shape {
            return Err(Error::shape(
                "Tensor::axpy",
                format!("{:?}", self.shape),
                format!("{:?}", x.shape),
            ));
        }
        for (s, &v) in self.data.iter_mut().zip(x.data.iter()) {
            *s += a * v;
        }
        Ok(())
    }

    /// Elementwise sum of two tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn scale(&mut self, a: f64) {
        for v in self.data.iter_mut() {
            *v *= a;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: context.to_string(),
                    index: i,
                    value: v,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn from_vec_rejects_nan() {
        let err = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn axpy_adds_scaled() {
        let mut a = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::from_vec(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        a.axpy(0.5, &b).unwrap();
        assert_eq!(a.data(), &[6.0, 12.0, 18.0]);
    }

    #[test]
    fn at3_is_channel_major() {
        let t = Tensor::from_vec(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at3(1, 0, 1), 5.0);
        assert_eq!(t.at3(0, 1, 0), 2.0);
    }
}
