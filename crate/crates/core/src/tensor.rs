//! Dense row-major f64 tensors.
//!
//! Forward-difference signals at `eps = 1e-5` drown in f32 rounding, so
//! everything in this crate is 64-bit.

use crate::error::{Error, Result};

/// Dense numeric array, row-major, arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new".into(),
                expected: vec![n],
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.clone())
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

    /// Verifies the finiteness invariant; exported operations call this
    /// before returning tensors to callers.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "reshape".into(),
                expected: vec![self.data.len()],
                got: vec![n],
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn scaled(&self, k: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, k: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Index helper for C×H×W image tensors.
pub fn chw_index(c: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    (c * h + y) * w + x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn reshape_preserves_len() {
        let t = Tensor::new(vec![2, 6], vec![1.0; 12]).unwrap();
        let r = t.clone().reshape(vec![3, 4]).unwrap();
        assert_eq!(r.shape(), &[3, 4]);
        assert!(t.reshape(vec![5, 3]).is_err());
    }

    #[test]
    fn chw_index_is_row_major_within_planes() {
        assert_eq!(chw_index(0, 0, 0, 4, 5), 0);
        assert_eq!(chw_index(0, 1, 2, 4, 5), 7);
        assert_eq!(chw_index(2, 3, 4, 4, 5), 2 * 20 + 19);
    }

    #[test]
    fn check_finite_flags_nan_and_inf() {
        let mut t = Tensor::zeros(vec![3]);
        assert!(t.check_finite("ok").is_ok());
        t.data_mut()[1] = f64::NAN;
        assert!(t.check_finite("nan").is_err());
        t.data_mut()[1] = f64::INFINITY;
        assert!(t.check_finite("inf").is_err());
    }

    #[test]
    fn add_scaled_and_max_abs() {
        let mut a = Tensor::new(vec![3], vec![1.0, -4.0, 2.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, 1.0, -1.0]).unwrap();
        a.add_scaled(&b, 2.0);
        assert_eq!(a.data(), &[2.0, -2.0, 0.0]);
        assert_eq!(a.max_abs(), 2.0);
    }
}
