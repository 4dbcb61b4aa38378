//! Dense row-major `f64` tensors and a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain value. Differentiable computation happens on a
//! [`Tape`]: leaves are registered with [`Tape::leaf`], every op appends a
//! node, and [`Tape::backward`] walks the nodes once in reverse order.

mod kernels;
mod tape;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub use kernels::{conv2d_forward, conv_output_size, matmul_into};
pub use tape::{Gradients, SparseLinearMap, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        assert!(!shape.is_empty() && n > 0, "tensor shape must be non-empty and positive");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        assert!(!shape.is_empty() && n > 0, "tensor shape must be non-empty and positive");
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mirrors the last axis (image columns, BEV x).
    pub fn flip_last_axis(&self) -> Self {
        let w = *self.shape.last().expect("non-empty shape");
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(w) {
            row.reverse();
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn flip_is_involution() {
        let t = Tensor::from_fn(&[2, 3, 5], |i| i as f64);
        assert_eq!(t.flip_last_axis().flip_last_axis(), t);
        assert_eq!(&t.flip_last_axis().data()[..5], &[4.0, 3.0, 2.0, 1.0, 0.0]);
    }
}
