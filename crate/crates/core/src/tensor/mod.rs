//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Values are flat row-major buffers with an explicit shape. Differentiation
//! is tape-based: forward calls on [`tape::Tape`] record every operation, and
//! [`tape::Tape::backward`] replays the tape in reverse with a fixed
//! accumulation order, so gradients are bit-reproducible.

pub mod adamw;
pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod tape;

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: unsupported shape {shape:?} ({reason})")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: data length {got} does not match shape {shape:?} ({expected} elements)")]
    DataLength { op: &'static str, shape: Vec<usize>, expected: usize, got: usize },
    #[error("masked_softmax: lane {lane} is fully masked")]
    DegenerateSlice { lane: usize },
    #[error("conv2d: {k}x{k} kernel with stride {stride} does not fit {h}x{w} input")]
    KernelDoesNotFit { k: usize, stride: usize, h: usize, w: usize },
    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op}: variable does not belong to this tape")]
    ForeignVar { op: &'static str },
    #[error("gradient for parameter '{name}' is not finite")]
    PoisonedGradient { name: String },
    #[error("{op}: index {index} out of bounds for dimension of size {size}")]
    IndexOutOfBounds { op: &'static str, index: usize, size: usize },
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                op: "Tensor::new",
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    /// Rank-2 tensor from nested rows; rows must be equally long.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::InvalidShape {
                    op: "Tensor::from_rows",
                    shape: vec![r, row.len()],
                    reason: format!("ragged rows ({c} vs {})", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor { shape: vec![r, c], data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar payload of a 0-d or single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rank-2 element accessor.
    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(TensorError::DataLength {
                op: "reshape",
                shape: shape.to_vec(),
                expected,
                got: self.numel(),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must already agree.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        let err = Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        match err {
            TensorError::DataLength { expected, got, .. } => {
                assert_eq!(expected, 6);
                assert_eq!(got, 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn scalar_and_item() {
        let t = Tensor::scalar(2.5f64);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.item(), 2.5);
    }

    #[test]
    fn from_rows_rejects_ragged() {
        let err = Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0]]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidShape { .. }));
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn row_accessor() {
        let t = Tensor::new(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(t.at2(1, 2), 5.0);
    }
}
