use crate::error::{Result, TensorError};
use crate::op::{BinaryKind, Op, UnaryKind};
use crate::real::Real;
use crate::shape::{broadcast_shape, broadcast_strides, for_each_run};
use crate::tensor::Tensor;

/// Applies `f` over broadcast operands, with slice loops for the common
/// contiguous / constant run layouts.
fn broadcast_apply<T: Real>(
    shape: &[usize],
    a: (&[T], &[usize]),
    b: (&[T], &[usize]),
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let mut data = Vec::with_capacity(crate::shape::numel(shape));
    let (da, db) = (a.0, b.0);
    for_each_run(shape, [a.1, b.1], |[ia, ib], len, step| match step {
        [1, 1] => data.extend(da[ia..ia + len].iter().zip(&db[ib..ib + len]).map(|(&x, &y)| f(x, y))),
        [1, 0] => {
            let y = db[ib];
            data.extend(da[ia..ia + len].iter().map(|&x| f(x, y)));
        }
        [0, 1] => {
            let x = da[ia];
            data.extend(db[ib..ib + len].iter().map(|&y| f(x, y)));
        }
        [sa, sb] => data.extend((0..len).map(|k| f(da[ia + k * sa], db[ib + k * sb]))),
    });
    data
}

impl<T: Real> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: BinaryKind, name: &'static str) -> Result<Tensor<T>> {
        let shape = if self.shape == other.shape {
            self.shape.clone()
        } else {
            broadcast_shape(name, &self.shape, &other.shape)?
        };
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let (a, b) = ((&self.data[..], &sa[..]), (&other.data[..], &sb[..]));
        let data = match kind {
            BinaryKind::Add => broadcast_apply(&shape, a, b, |x, y| x + y),
            BinaryKind::Sub => broadcast_apply(&shape, a, b, |x, y| x - y),
            BinaryKind::Mul => broadcast_apply(&shape, a, b, |x, y| x * y),
            BinaryKind::Div => broadcast_apply(&shape, a, b, |x, y| x / y),
        };
        Tensor::record(Op::Binary(kind), &[self, other], shape, data)
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        self.add(&Tensor::scalar(c))
    }

    pub fn mul_scalar(&self, c: T) -> Result<Tensor<T>> {
        self.mul(&Tensor::scalar(c))
    }

    fn unary(&self, kind: UnaryKind) -> Result<Tensor<T>> {
        let data: Vec<T> = match kind {
            UnaryKind::Neg => self.data.iter().map(|&v| -v).collect(),
            UnaryKind::Exp => self.data.iter().map(|&v| v.exp()).collect(),
            UnaryKind::Log | UnaryKind::Sqrt => {
                let op = if kind == UnaryKind::Log { "log" } else { "sqrt" };
                if let Some((index, &v)) = self.data.iter().enumerate().find(|(_, &v)| !(v > T::zero())) {
                    return Err(TensorError::Domain {
                        op,
                        index,
                        value: v.as_f64(),
                    });
                }
                if kind == UnaryKind::Log {
                    self.data.iter().map(|&v| v.ln()).collect()
                } else {
                    self.data.iter().map(|&v| v.sqrt()).collect()
                }
            }
            UnaryKind::Square => self.data.iter().map(|&v| v * v).collect(),
            UnaryKind::Sigmoid => self.data.iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::Softplus => self.data.iter().map(|&v| softplus(v)).collect(),
            UnaryKind::LeakyRelu(alpha) => {
                let alpha = T::from_f64_lossy(alpha);
                self.data
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { alpha * v })
                    .collect()
            }
        };
        Tensor::record(Op::Unary(kind), &[self], self.shape.clone(), data)
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Exp)
    }

    /// Natural logarithm. Every element must be strictly positive.
    pub fn log(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Log)
    }

    /// Square root. Every element must be strictly positive.
    pub fn sqrt(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Square)
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn leaky_relu(&self, alpha: f64) -> Result<Tensor<T>> {
        self.unary(UnaryKind::LeakyRelu(alpha))
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(v: T) -> T {
    // max(v, 0) + ln(1 + e^{-|v|})
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
