//! Primitive operations and their vector-Jacobian products.
//!
//! Every backward rule is written in terms of public tensor operations. When
//! the reverse sweep runs in recording mode its operands are tracked, so the
//! rules below are recorded like any forward computation and can themselves be
//! differentiated. The convolution family is closed under this: the adjoints
//! of `conv`, `conv_input_grad` and `conv_weight_grad` are expressed with the
//! same three primitives.

use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Sigmoid,
    Softplus,
    LeakyRelu(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvParams {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Binary(BinaryKind),
    Unary(UnaryKind),
    SumTo(Vec<usize>),
    BroadcastTo(Vec<usize>),
    Reshape(Vec<usize>),
    Transpose,
    MatMul,
    Conv(ConvParams),
    /// inputs: (output gradient, kernel); payload carries the input shape
    ConvInputGrad(ConvParams, Vec<usize>),
    /// inputs: (input, output gradient); payload carries the kernel shape
    ConvWeightGrad(ConvParams, Vec<usize>),
    Upsample(usize),
    BlockSum(usize),
}

impl Op {
    /// Gradients for each input given the upstream gradient `g`. Entries for
    /// inputs whose `wanted` flag is false may be `None`.
    pub(crate) fn vjp<T: Real>(
        &self,
        inputs: &[Tensor<T>],
        output: &Tensor<T>,
        g: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
        let grads = match self {
            Op::Leaf => Vec::new(),
            Op::Binary(kind) => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let ga = if want(0) {
                    let raw = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => g.mul(b)?,
                        BinaryKind::Div => g.div(b)?,
                    };
                    Some(raw.sum_to(a.shape())?)
                } else {
                    None
                };
                let gb = if want(1) {
                    let raw = match kind {
                        BinaryKind::Add => g.clone(),
                        BinaryKind::Sub => g.neg()?,
                        BinaryKind::Mul => g.mul(a)?,
                        // d(a/b)/db = -(a/b)/b
                        BinaryKind::Div => g.mul(output)?.div(b)?.neg()?,
                    };
                    Some(raw.sum_to(b.shape())?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Unary(kind) => {
                let x = &inputs[0];
                let gx = match kind {
                    UnaryKind::Neg => g.neg()?,
                    UnaryKind::Exp => g.mul(output)?,
                    UnaryKind::Log => g.div(x)?,
                    UnaryKind::Sqrt => g.div(output)?.mul_scalar(T::from_f64_lossy(0.5))?,
                    UnaryKind::Square => g.mul(x)?.mul_scalar(T::from_f64_lossy(2.0))?,
                    UnaryKind::Sigmoid => {
                        let one_minus = output.neg()?.add_scalar(T::one())?;
                        g.mul(output)?.mul(&one_minus)?
                    }
                    UnaryKind::Softplus => g.mul(&x.sigmoid()?)?,
                    UnaryKind::LeakyRelu(alpha) => {
                        let alpha = T::from_f64_lossy(*alpha);
                        let slope: Vec<T> = x
                            .data()
                            .iter()
                            .map(|&v| if v > T::zero() { T::one() } else { alpha })
                            .collect();
                        g.mul(&Tensor::from_vec(x.shape().to_vec(), slope)?)?
                    }
                };
                vec![Some(gx)]
            }
            Op::SumTo(_) => vec![Some(g.broadcast_to(inputs[0].shape())?)],
            Op::BroadcastTo(_) => vec![Some(g.sum_to(inputs[0].shape())?)],
            Op::Reshape(_) => vec![Some(g.reshape(inputs[0].shape())?)],
            Op::Transpose => vec![Some(g.transpose()?)],
            Op::MatMul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let ga = if want(0) {
                    Some(g.matmul(&b.transpose()?)?)
                } else {
                    None
                };
                let gb = if want(1) {
                    Some(a.transpose()?.matmul(g)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Conv(p) => {
                let (x, w) = (&inputs[0], &inputs[1]);
                let gx = if want(0) {
                    Some(g.conv3d_input_grad(w, x.shape(), p.stride, p.pad)?)
                } else {
                    None
                };
                let gw = if want(1) {
                    Some(x.conv3d_weight_grad(g, w.shape(), p.stride, p.pad)?)
                } else {
                    None
                };
                vec![gx, gw]
            }
            Op::ConvInputGrad(p, _) => {
                // out = Aᵀ_w(gy); <out, G> = <gy, conv(G, w)>
                let (gy, w) = (&inputs[0], &inputs[1]);
                let g_gy = if want(0) {
                    Some(g.conv3d(w, p.stride, p.pad)?)
                } else {
                    None
                };
                let g_w = if want(1) {
                    Some(g.conv3d_weight_grad(gy, w.shape(), p.stride, p.pad)?)
                } else {
                    None
                };
                vec![g_gy, g_w]
            }
            Op::ConvWeightGrad(p, _) => {
                // out = W(x, gy); <out, G> = <gy, conv(x, G)>
                let (x, gy) = (&inputs[0], &inputs[1]);
                let g_x = if want(0) {
                    Some(gy.conv3d_input_grad(g, x.shape(), p.stride, p.pad)?)
                } else {
                    None
                };
                let g_gy = if want(1) {
                    Some(x.conv3d(g, p.stride, p.pad)?)
                } else {
                    None
                };
                vec![g_x, g_gy]
            }
            Op::Upsample(f) => vec![Some(g.block_sum3d(*f)?)],
            Op::BlockSum(f) => vec![Some(g.upsample3d(*f)?)],
        };
        Ok(grads)
    }
}
