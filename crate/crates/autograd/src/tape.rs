//! The differentiation tape and the reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Result, TensorError};
use crate::op::Op;
use crate::real::Real;
use crate::tensor::{Node, Tensor};

/// Value captured by a record: the node it came from (if tracked) plus its
/// shape and data. Records never hold a tape handle, so a tape and the
/// tensors on it do not form reference cycles.
#[derive(Clone)]
pub(crate) struct Saved<T: Real> {
    pub(crate) id: Option<usize>,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<T>>,
}

pub(crate) struct Record<T: Real> {
    op: Op,
    inputs: Vec<Saved<T>>,
    output: Saved<T>,
}

struct Inner<T: Real> {
    records: Vec<Record<T>>,
    higher_order: bool,
    consumed: bool,
}

/// Ordered record of primitive operations.
///
/// A tape is a cheap handle; clones refer to the same record list. Records
/// are appended in execution order, so every record's inputs precede it.
///
/// A tape created with [`Tape::higher_order`] may run reverse sweeps that are
/// themselves recorded (`record_reverse = true`). The gradients those sweeps
/// return are tracked tensors and can be differentiated again, which is what
/// a gradient-norm penalty needs.
pub struct Tape<T: Real> {
    inner: Arc<Mutex<Inner<T>>>,
}

impl<T: Real> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> std::fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock();
        f.debug_struct("Tape")
            .field("records", &inner.records.len())
            .field("higher_order", &inner.higher_order)
            .field("consumed", &inner.consumed)
            .finish()
    }
}

/// Gradients keyed by tape node.
#[derive(Clone, Default)]
pub struct GradientMap<T: Real> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    /// Gradient with respect to `t`, if `t` is a leaf reachable from the
    /// differentiated scalar.
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        t.node_id().and_then(|id| self.grads.get(&id))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Real> Tape<T> {
    /// A first-order tape.
    pub fn new() -> Self {
        Self::with_flag(false)
    }

    /// A tape whose reverse sweeps may be recorded for higher-order
    /// differentiation.
    pub fn higher_order() -> Self {
        Self::with_flag(true)
    }

    fn with_flag(higher_order: bool) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                records: Vec::new(),
                higher_order,
                consumed: false,
            })),
        }
    }

    pub fn records_reverse(&self) -> bool {
        self.inner.lock().higher_order
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.lock().consumed
    }

    pub fn len(&self) -> usize {
        self.inner.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same_as(&self, other: &Tape<T>) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, op: Op, inputs: Vec<Saved<T>>, mut output: Saved<T>) -> usize {
        let mut inner = self.inner.lock();
        let id = inner.records.len();
        output.id = Some(id);
        inner.records.push(Record { op, inputs, output });
        id
    }

    /// Registers `t` as a differentiable leaf on this tape.
    pub fn watch(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = t.detach();
        let id = self.push(Op::Leaf, Vec::new(), out.saved());
        out.node = Some(Node {
            tape: self.clone(),
            id,
        });
        out
    }

    /// Gradients of `scalar` with respect to every leaf it depends on.
    pub fn backward(&self, scalar: &Tensor<T>, record_reverse: bool) -> Result<GradientMap<T>> {
        let (root, is_leaf) = self.prepare(scalar, record_reverse)?;
        let needs = vec![true; root + 1];
        let grads = self.sweep(scalar, root, &needs, &is_leaf, record_reverse)?;
        let mut map = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if is_leaf[id] {
                    map.insert(id, g);
                }
            }
        }
        Ok(GradientMap { grads: map })
    }

    /// Gradients of `scalar` with respect to `wrt`, in order. Branches that
    /// cannot reach any of `wrt` are skipped. A target the scalar does not
    /// depend on gets a zero gradient.
    pub fn grad(&self, scalar: &Tensor<T>, wrt: &[&Tensor<T>], record_reverse: bool) -> Result<Vec<Tensor<T>>> {
        let (root, _) = self.prepare(scalar, record_reverse)?;
        let mut targets = Vec::with_capacity(wrt.len());
        for t in wrt {
            match &t.node {
                Some(n) if n.tape.same_as(self) => targets.push(n.id),
                _ => return Err(TensorError::NotOnTape),
            }
        }
        let mut needs = vec![false; root + 1];
        for &id in &targets {
            if id <= root {
                needs[id] = true;
            }
        }
        {
            let inner = self.inner.lock();
            for id in 0..=root {
                if !needs[id] {
                    needs[id] = inner.records[id]
                        .inputs
                        .iter()
                        .any(|s| s.id.is_some_and(|i| needs[i]));
                }
            }
        }
        let mut keep = vec![false; root + 1];
        for &id in &targets {
            if id <= root {
                keep[id] = true;
            }
        }
        let grads = self.sweep(scalar, root, &needs, &keep, record_reverse)?;
        Ok(targets
            .iter()
            .zip(wrt)
            .map(|(&id, t)| {
                grads
                    .get(id)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(t.shape.clone()))
            })
            .collect())
    }

    fn prepare(&self, scalar: &Tensor<T>, record_reverse: bool) -> Result<(usize, Vec<bool>)> {
        if scalar.numel() != 1 {
            return Err(TensorError::NotScalar(scalar.shape.clone()));
        }
        let root = match &scalar.node {
            Some(n) if n.tape.same_as(self) => n.id,
            _ => return Err(TensorError::NotOnTape),
        };
        let inner = self.inner.lock();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if record_reverse && !inner.higher_order {
            return Err(TensorError::HigherOrderDisabled);
        }
        let is_leaf = inner.records[..=root]
            .iter()
            .map(|r| matches!(r.op, Op::Leaf))
            .collect();
        Ok((root, is_leaf))
    }

    fn materialize(&self, saved: &Saved<T>, record: bool) -> Tensor<T> {
        let mut t = Tensor::from_parts(saved.shape.clone(), Arc::clone(&saved.data));
        if record {
            t.node = saved.id.map(|id| Node {
                tape: self.clone(),
                id,
            });
        }
        t
    }

    /// Reverse sweep from `root` through the nodes flagged in `needs`.
    /// Returns the accumulated gradients of the nodes flagged in `keep`.
    fn sweep(
        &self,
        scalar: &Tensor<T>,
        root: usize,
        needs: &[bool],
        keep: &[bool],
        record: bool,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(scalar.shape.clone()));
        let mut kept: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        for id in (0..=root).rev() {
            if !needs[id] {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if keep[id] {
                kept[id] = Some(g.clone());
            }
            let (op, inputs, output) = {
                let inner = self.inner.lock();
                let r = &inner.records[id];
                (r.op.clone(), r.inputs.clone(), r.output.clone())
            };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let wanted: Vec<bool> = inputs
                .iter()
                .map(|s| s.id.is_some_and(|i| needs[i]))
                .collect();
            if !wanted.iter().any(|&w| w) {
                continue;
            }
            let in_tensors: Vec<Tensor<T>> = inputs.iter().map(|s| self.materialize(s, record)).collect();
            let out_tensor = self.materialize(&output, record);
            let g = if record { g } else { g.detach() };
            let input_grads = op.vjp(&in_tensors, &out_tensor, &g, &wanted)?;
            for ((saved, gi), w) in inputs.iter().zip(input_grads).zip(&wanted) {
                if !w {
                    continue;
                }
                let (Some(i), Some(gi)) = (saved.id, gi) else {
                    continue;
                };
                grads[i] = Some(match grads[i].take() {
                    Some(acc) => acc.add(&gi)?,
                    None => gi,
                });
            }
        }
        if !record {
            self.inner.lock().consumed = true;
        }
        Ok(kept)
    }
}

impl<T: Real> Tensor<T> {
    /// Convenience for `tape.backward(self, record_reverse)` on the tape this
    /// tensor is recorded on.
    pub fn backward(&self, record_reverse: bool) -> Result<GradientMap<T>> {
        let tape = self.tape().ok_or(TensorError::NotOnTape)?.clone();
        tape.backward(self, record_reverse)
    }
}
