use crate::error::{Result, TensorError};
use crate::op::Op;
use crate::real::Real;
use crate::shape::{broadcast_strides, broadcasts_to, for_each_run, numel, strides};
use crate::tensor::Tensor;

/// Reduction kinds accepted by [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl<T: Real> Tensor<T> {
    /// Sums over the axes along which `target` broadcasts up to this shape,
    /// producing a tensor of shape `target`. Adjoint of [`Tensor::broadcast_to`].
    pub fn sum_to(&self, target: &[usize]) -> Result<Tensor<T>> {
        if target == self.shape.as_slice() {
            return Ok(self.clone());
        }
        if !broadcasts_to(target, &self.shape) {
            return Err(TensorError::ShapeMismatch {
                op: "sum_to",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let mut out = vec![T::zero(); numel(target)];
        let own = strides(&self.shape);
        let dst = broadcast_strides(target, &self.shape);
        let src = &self.data;
        for_each_run(&self.shape, [&own, &dst], |[i, o], len, step| match step {
            [1, 0] => out[o] += src[i..i + len].iter().fold(T::zero(), |acc, &v| acc + v),
            [1, 1] => out[o..o + len].iter_mut().zip(&src[i..i + len]).for_each(|(d, &v)| *d += v),
            [si, so] => (0..len).for_each(|k| out[o + k * so] += src[i + k * si]),
        });
        Tensor::record(Op::SumTo(target.to_vec()), &[self], target.to_vec(), out)
    }

    /// Replicates along broadcast axes to reach `target`.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor<T>> {
        if target == self.shape.as_slice() {
            return Ok(self.clone());
        }
        if !broadcasts_to(&self.shape, target) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let src_strides = broadcast_strides(&self.shape, target);
        let mut out = Vec::with_capacity(numel(target));
        let src = &self.data;
        for_each_run(target, [&src_strides], |[i], len, [step]| match step {
            0 => out.extend(std::iter::repeat(src[i]).take(len)),
            1 => out.extend_from_slice(&src[i..i + len]),
            _ => out.extend((0..len).map(|k| src[i + k * step])),
        });
        Tensor::record(Op::BroadcastTo(target.to_vec()), &[self], target.to_vec(), out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        Tensor::record(
            Op::Reshape(shape.to_vec()),
            &[self],
            shape.to_vec(),
            std::sync::Arc::clone(&self.data),
        )
    }

    /// Sum or mean over `axes` (all axes when `None`). Reduced axes are kept
    /// with extent 1 when `keepdim` is set, dropped otherwise.
    pub fn reduce(&self, kind: Reduction, axes: Option<&[usize]>, keepdim: bool) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        match axes {
            None => reduced.iter_mut().for_each(|r| *r = true),
            Some(list) => {
                for &axis in list {
                    if axis >= rank {
                        return Err(TensorError::InvalidAxis { axis, rank });
                    }
                    reduced[axis] = true;
                }
            }
        }
        let kept: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let count: usize = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        let mut out = self.sum_to(&kept)?;
        if kind == Reduction::Mean {
            out = out.mul_scalar(T::one() / T::from_usize(count.max(1)).unwrap_or_else(T::one))?;
        }
        if keepdim {
            Ok(out)
        } else {
            let dropped: Vec<usize> = self
                .shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect();
            out.reshape(&dropped)
        }
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        self.reduce(Reduction::Sum, None, false)
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&self) -> Result<Tensor<T>> {
        self.reduce(Reduction::Mean, None, false)
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        self.reduce(Reduction::Sum, Some(axes), keepdim)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        self.reduce(Reduction::Mean, Some(axes), keepdim)
    }

    /// Flattens every axis after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten_batch(&self) -> Result<Tensor<T>> {
        let n = *self.shape.first().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        let rest = if n == 0 { 0 } else { self.numel() / n };
        self.reshape(&[n, rest])
    }
}
