use std::fmt;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::op::Op;
use crate::real::Real;
use crate::shape::numel;
use crate::tape::{Saved, Tape};

/// Link from a tensor into the tape that recorded it.
#[derive(Clone)]
pub(crate) struct Node<T: Real> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
}

/// Dense row-major N-dimensional array.
///
/// Cloning is cheap: the element buffer is shared. A tensor produced by an
/// operation with at least one tracked operand is itself tracked on the same
/// tape; everything else is a constant for differentiation purposes.
#[derive(Clone)]
pub struct Tensor<T: Real> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) node: Option<Node<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self::from_parts(shape, Arc::new(data)))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            node: None,
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_parts(shape, Arc::new(vec![value; n]))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), Arc::new(vec![value]))
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

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same values, no link to any tape.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.shape.clone(), Arc::clone(&self.data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn saved(&self) -> Saved<T> {
        Saved {
            id: self.node_id(),
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
        }
    }

    /// Builds the result of an operation, recording it when any operand is
    /// tracked.
    pub(crate) fn record(
        op: Op,
        inputs: &[&Tensor<T>],
        shape: Vec<usize>,
        data: impl Into<Arc<Vec<T>>>,
    ) -> Result<Self> {
        let mut tape: Option<&Tape<T>> = None;
        for t in inputs {
            if let Some(node) = &t.node {
                match tape {
                    None => tape = Some(&node.tape),
                    Some(existing) if existing.same_as(&node.tape) => {}
                    Some(_) => return Err(TensorError::TapeMismatch),
                }
            }
        }
        let mut out = Self::from_parts(shape, data.into());
        if let Some(tape) = tape {
            let saved_inputs = inputs.iter().map(|t| t.saved()).collect();
            let id = tape.push(op, saved_inputs, out.saved());
            out.node = Some(Node {
                tape: tape.clone(),
                id,
            });
        }
        Ok(out)
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.shape);
        if self.numel() <= 16 {
            d.field("data", &self.data);
        }
        d.field("node", &self.node_id()).finish()
    }
}
