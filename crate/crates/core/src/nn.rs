//! Parameterized layers, initialization, and the Adam optimizer.

use std::collections::BTreeMap;

use pavae_autograd::{GradientMap, Real, Tape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Negative slope of every leaky-ReLU in the models.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Stabilizer inside instance normalization.
pub const NORM_EPS: f64 = 1e-5;

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    id: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

impl<T: Real> Parameter<T> {
    pub fn new(id: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            id: id.into(),
            value: value.detach(),
            grad: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::invalid(
                "parameter",
                format!(
                    "{}: shape {:?} does not match {:?}",
                    self.id,
                    value.shape(),
                    self.value.shape()
                ),
            ));
        }
        self.value = value.detach();
        Ok(())
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::invalid(
                "gradient",
                format!("{}: shape {:?} does not match {:?}", self.id, grad.shape(), self.value.shape()),
            ));
        }
        self.grad = Some(grad.detach());
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Makes the value a leaf of `tape`, so its gradient can be collected.
    pub fn attach(&mut self, tape: &Tape<T>) {
        self.value = tape.watch(&self.value.detach());
    }

    pub fn detach(&mut self) {
        self.value = self.value.detach();
    }
}

/// Anything owning parameters.
pub trait Module<T: Real> {
    fn params(&self) -> Vec<&Parameter<T>>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn attach(&mut self, tape: &Tape<T>) {
        self.params_mut().into_iter().for_each(|p| p.attach(tape));
    }

    fn detach(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.detach());
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().numel()).sum()
    }
}

/// Copies gradients from a backward sweep into the given parameters.
/// Parameters the loss does not reach get a zero gradient.
pub fn collect_grads<T: Real>(params: Vec<&mut Parameter<T>>, grads: &GradientMap<T>) -> Result<()> {
    for p in params {
        let g = match grads.get(&p.value) {
            Some(g) => g.clone(),
            None => Tensor::zeros(p.shape()),
        };
        p.set_grad(g)?;
    }
    Ok(())
}

/// Samples `N(0, σ²)` with `σ = √(2 / ((1 + a²)·fan_in))`, `a` the leaky slope.
pub fn kaiming_init<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::invalid("fan_in", "must be at least 1"));
    }
    let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let s: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(std * s)
        })
        .collect();
    Ok(Tensor::from_vec(shape.to_vec(), data)?)
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(id: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: Parameter::new(format!("{id}.weight"), kaiming_init(&[fan_out, fan_in], fan_in, rng)?),
            bias: Some(Parameter::new(format!("{id}.bias"), Tensor::zeros([fan_out]))),
        })
    }

    /// All-zero weights and bias.
    pub fn zeroed(id: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Parameter::new(format!("{id}.weight"), Tensor::zeros([fan_out, fan_in])),
            bias: Some(Parameter::new(format!("{id}.bias"), Tensor::zeros([fan_out]))),
        }
    }

    /// Drops the bias, for read-outs whose loss is invariant to it.
    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight.value().transpose()?)?;
        match &self.bias {
            Some(b) => Ok(y.add(b.value())?),
            None => Ok(y),
        }
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        std::iter::once(&self.weight).chain(&self.bias).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        std::iter::once(&mut self.weight).chain(&mut self.bias).collect()
    }
}

/// 3³ convolution with padding 1 and a per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv3d<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub stride: usize,
}

impl<T: Real> Conv3d<T> {
    pub const KERNEL: usize = 3;
    pub const PAD: usize = 1;

    pub fn new<R: Rng + ?Sized>(
        id: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * 27;
        Ok(Self {
            weight: Parameter::new(
                format!("{id}.weight"),
                kaiming_init(&[out_channels, in_channels, 3, 3, 3], fan_in, rng)?,
            ),
            bias: Some(Parameter::new(format!("{id}.bias"), Tensor::zeros([out_channels]))),
            stride,
        })
    }

    pub fn zeroed(id: &str, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            weight: Parameter::new(format!("{id}.weight"), Tensor::zeros([out_channels, in_channels, 3, 3, 3])),
            bias: Some(Parameter::new(format!("{id}.bias"), Tensor::zeros([out_channels]))),
            stride,
        }
    }

    /// Drops the bias; used before instance normalization, which removes
    /// any per-channel constant anyway.
    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.conv3d(self.weight.value(), self.stride, Self::PAD)?;
        match &self.bias {
            Some(b) => Ok(y.add(&b.value().reshape(&[1, self.out_channels(), 1, 1, 1])?)?),
            None => Ok(y),
        }
    }
}

impl<T: Real> Module<T> for Conv3d<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        std::iter::once(&self.weight).chain(&self.bias).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        std::iter::once(&mut self.weight).chain(&mut self.bias).collect()
    }
}

/// Standardizes every `(n, c)` slice of a `[N, C, D, H, W]` tensor over its
/// spatial axes: `(x − μ) / √(σ² + eps)` with the biased variance.
pub fn instance_norm3d<T: Real>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let &[_, _, d, h, w] = x.shape() else {
        return Err(Error::invalid("instance_norm3d input", format!("expected rank 5, got {:?}", x.shape())));
    };
    if d * h * w < 2 {
        return Err(Error::invalid("instance_norm3d input", "spatial volume must hold at least 2 voxels"));
    }
    let mean = x.mean_axes(&[2, 3, 4], true)?;
    let centered = x.sub(&mean)?;
    let var = centered.square()?.mean_axes(&[2, 3, 4], true)?;
    let denom = var.add_scalar(T::from_f64_lossy(eps))?.sqrt()?;
    Ok(centered.div(&denom)?)
}

pub fn leaky<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x.leaky_relu(LEAKY_SLOPE)?)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam optimizer state for one group of parameters, keyed by parameter id.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// First and second moments of a parameter, once it has been stepped.
    pub fn moments(&self, id: &str) -> Option<(&[T], &[T])> {
        self.moments.get(id).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    /// One bias-corrected Adam update. Every parameter must carry a
    /// gradient; nothing is modified otherwise. Gradients are cleared.
    pub fn step(&mut self, params: Vec<&mut Parameter<T>>) -> Result<()> {
        for p in &params {
            if p.grad.is_none() {
                return Err(Error::MissingGradient(p.id.clone()));
            }
            if let Some(s) = self.moments.get(&p.id) {
                if s.m.len() != p.value.numel() {
                    return Err(Error::OptimizerMismatch(p.id.clone()));
                }
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        for p in params {
            let g = p.grad.take().expect("checked above");
            let n = p.value.numel();
            let state = self.moments.entry(p.id.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let mut next = p.value.to_vec();
            for (i, (x, &gi)) in next.iter_mut().zip(g.data()).enumerate() {
                state.m[i] = b1 * state.m[i] + (T::one() - b1) * gi;
                state.v[i] = b2 * state.v[i] + (T::one() - b2) * gi * gi;
                let m_hat = state.m[i].as_f64() / c1;
                let v_hat = state.v[i].as_f64() / c2;
                *x -= T::from_f64_lossy(lr * m_hat / (v_hat.sqrt() + eps));
            }
            let value = Tensor::from_vec(p.value.shape().to_vec(), next)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(p.id.clone()));
            }
            p.value = value;
        }
        Ok(())
    }
}
