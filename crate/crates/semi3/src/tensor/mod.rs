//! Dense f64 tensors with recorded operations and reverse-mode gradients.
//!
//! A [`Tensor`] is an immutable n-dimensional array in row-major order.
//! Operations executed under a [`Recording`] append nodes to it; calling
//! [`Recording::backward`] on a scalar output walks the node list in reverse
//! and returns a [`GradMap`]. Everything is 64-bit floats so the
//! finite-difference gradient checks can be tight.

pub mod ops;
pub mod recording;

pub use recording::{GradMap, NodeId, Recording};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Reference into the recording that produced a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub rec_id: u64,
    pub node: NodeId,
}

/// Dense n-dimensional array of f64 in row-major order. Immutable once
/// produced; cloning shares the buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    /// Build a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            requires_grad: false,
            node: None,
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Extract the single value of a scalar (numel == 1) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Tensor {
        self.node = Some(node);
        self.requires_grad = true;
        self
    }

    /// Same buffer, detached from any recording.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    /// Row-major offset for a 4-d index. Debug-asserted, hot path.
    #[inline]
    pub(crate) fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 4);
        let (_, cs, hs, ws) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * hs + h) * ws + w]
    }
}

impl PartialEq for Tensor {
    /// Bitwise equality of shape and data. NaN != NaN, as usual.
    fn eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(4.25);
        assert!(s.shape().is_empty());
        assert_eq!(s.item().unwrap(), 4.25);
    }

    #[test]
    fn item_rejects_non_scalar() {
        assert!(Tensor::zeros(&[2]).item().is_err());
    }

    #[test]
    fn bitwise_equality() {
        let a = Tensor::new(vec![2], vec![1.0, -0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, -0.0]).unwrap();
        let c = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c); // -0.0 and 0.0 differ bitwise
    }
}
