//! Dense n-dimensional arrays and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus a flat row-major buffer (NCHW
//! for images). All differentiable computation goes through a [`Tape`], an
//! arena of nodes recorded in topological order; [`Var`] is a handle into
//! the tape. Calling [`Tape::backward`] on a scalar node walks the tape in
//! reverse and accumulates gradients into every reachable leaf that was
//! created with `requires_grad`.

mod kernels;
mod tape;

pub use kernels::{conv_output_geometry, ConvGeometry, Padding};
pub use tape::{Tape, Var};

use crate::element::Element;
use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank-{expected} input, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("conv2d: input has {input} channels but weights expect {weights}")]
    ChannelMismatch { input: usize, weights: usize },
    #[error("{op}: stride must be positive")]
    NonPositiveStride { op: &'static str },
    #[error("conv2d: {kh}x{kw} kernel exceeds padded input {h}x{w}")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        h: usize,
        w: usize,
    },
    #[error("avg_pool2d: {window}x{window} window exceeds input {h}x{w}")]
    WindowTooLarge { window: usize, h: usize, w: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("concat: batch dimensions differ ({lhs} vs {rhs})")]
    BatchMismatch { lhs: usize, rhs: usize },
}

/// Dense n-dimensional array, flat row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Build a tensor from a shape and matching flat buffer.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::ZERO)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn from_slice(values: &[E]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Convert elementwise to another precision.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0f32; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn cast_round_trips_values() {
        let t = Tensor::<f64>::from_slice(&[1.5, -2.25]);
        let f: Tensor<f32> = t.cast();
        assert_eq!(f.data(), &[1.5f32, -2.25]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_slice(&[1.0, 2.0, 3.0, 4.0])
            .reshaped(vec![2, 2])
            .unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert!(t.clone().reshaped(vec![3, 2]).is_err());
    }
}
