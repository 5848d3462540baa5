//! Dense `f32` tensors with a reverse-mode differentiation tape.
//!
//! Values are stored row-major as 32-bit floats. Reductions and matrix
//! products accumulate in 64-bit and round once on output.
//!
//! Every operation lives on [`Tape`]. A recording tape appends one node per
//! operation whose inputs carry a node id; a tape built with
//! [`Tape::no_grad`] only evaluates. Gradients with respect to any recorded
//! node (leaf or intermediate) are obtained with [`Tape::backward`].

mod conv;
mod gemm;
mod ops;
mod tape;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use conv::{BatchNormMode, BatchStats, Conv2dSpec};
pub use tape::{grad_l2_norm, BackwardFn, GradientMap, NodeId, Tape};

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: input contains non-positive values (clamp before taking the log)")]
    NonPositiveLog { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must have shape [1], got {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: loss tensor is not recorded on this tape")]
    LossNotRecorded,
    #[error("node {0} is not on the active tape")]
    UnknownNode(usize),
    #[error("gradient map has no entry for node {0}")]
    MissingGradient(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Immutable n-dimensional array of `f32` values.
///
/// Cloning is cheap: the buffer is shared. `node` is set when the value was
/// produced by (or registered on) a recording tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f32]>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                reason: format!(
                    "zero-sized dimension in {shape:?} with {} values",
                    data.len()
                ),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                reason: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zeros has matching length")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full has matching length")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(&[1], vec![value]).expect("scalar")
    }

    /// Builds a tensor from `f64` values, rounding each to `f32`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<[f32]>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Node id on the tape that produced this value, if any.
    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape link.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Reinterprets the buffer under a new shape without touching the tape.
    /// Use [`Tape::reshape`] when gradients must flow through the reshape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: None,
        })
    }

    /// True when both tensors share the same backing buffer.
    pub fn shares_buffer(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-level equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Row-wise argmax for a `[N, K]` tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.ndim() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "argmax_rows",
                reason: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        let k = self.shape[1];
        Ok(self
            .data
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Copies rows `indices` of the leading axis into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.ndim() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "select_rows",
                reason: "rank-0 tensor".into(),
            });
        }
        let rows = self.shape[0];
        let stride = self.numel() / rows.max(1);
        let mut out = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::InvalidArgument {
                    op: "select_rows",
                    reason: format!("row {i} out of range for {rows} rows"),
                });
            }
            out.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(&shape, out)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("node", &self.node)
            .finish()
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Stacks equally-shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or(TensorError::InvalidArgument {
        op: "stack",
        reason: "no tensors".into(),
    })?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "stack",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn reshaped_shares_buffer() {
        let t = Tensor::new(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert!(t.shares_buffer(&r));
        assert_eq!(r.data(), t.data());
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let t = Tensor::new(&[2, 3], vec![1.0, 3.0, 3.0, 0.0, -1.0, 2.0]).unwrap();
        assert_eq!(t.argmax_rows().unwrap(), vec![1, 2]);
    }

    #[test]
    fn select_rows_copies() {
        let t = Tensor::new(&[3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let s = t.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4., 5., 0., 1.]);
    }
}
