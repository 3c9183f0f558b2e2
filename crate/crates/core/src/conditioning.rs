//! Guidance blocks that modulate normalized decoder features.
//!
//! Both blocks compute `h·(1 + γ) + β`. The condition block derives
//! per-channel `γ, β` from a small vector (lesion size); the mask block derives
//! voxelwise `γ, β` from a binary mask through three convolutions. Their
//! output heads start at zero, so a fresh block is an exact identity.

use pavae_autograd::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky, Conv3d, Linear, Module, Parameter};
use crate::volume::{voxel_count, MaskVolume};

/// Semantic condition fed to the mask decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub values: Vec<f64>,
}

impl ConditionVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("condition", format!("{values:?}")));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Normalized log lesion size: `ln(foreground) / ln(total)`, in `[0, 1]`.
/// A one-voxel volume that is foreground maps to 1.
pub fn encode_condition(mask: &MaskVolume) -> Result<ConditionVector> {
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let total = voxel_count(mask.dims());
    let value = if total == 1 {
        1.0
    } else {
        (count as f64).ln() / (total as f64).ln()
    };
    ConditionVector::new(vec![value])
}

/// Stacks conditions into an `[N, k]` tensor.
pub fn condition_batch<T: Real>(conditions: &[ConditionVector]) -> Result<Tensor<T>> {
    let k = conditions
        .first()
        .ok_or_else(|| Error::invalid("condition batch", "empty"))?
        .dim();
    let mut data = Vec::with_capacity(conditions.len() * k);
    for c in conditions {
        if c.dim() != k {
            return Err(Error::invalid("condition batch", format!("mixed dimensions {} and {k}", c.dim())));
        }
        data.extend(c.values.iter().map(|&v| T::from_f64_lossy(v)));
    }
    Ok(Tensor::from_vec(vec![conditions.len(), k], data)?)
}

fn downsample_ratio(side: usize, target_side: usize) -> Result<usize> {
    if target_side == 0 || side % target_side != 0 {
        return Err(Error::invalid(
            "downsample target",
            format!("{target_side} does not divide side {side}"),
        ));
    }
    Ok(side / target_side)
}

/// Nearest-neighbour downsampling of a cubic mask: output voxel `(i, j, k)`
/// takes the input at `(i·r, j·r, k·r)`.
pub fn mask_downsample_nearest(mask: &MaskVolume, target_side: usize) -> Result<MaskVolume> {
    let side = mask
        .side()
        .ok_or_else(|| Error::invalid("mask", format!("not a cube: {:?}", mask.dims())))?;
    let r = downsample_ratio(side, target_side)?;
    let mut out = MaskVolume::empty([target_side; 3]);
    for d in 0..target_side {
        for h in 0..target_side {
            for w in 0..target_side {
                out.set(d, h, w, mask.get(d * r, h * r, w * r));
            }
        }
    }
    Ok(out)
}

/// The same selection applied to every `[.., S, S, S]` slab of a constant
/// tensor. The result is not tracked.
pub fn downsample_nearest_tensor<T: Real>(t: &Tensor<T>, target_side: usize) -> Result<Tensor<T>> {
    let shape = t.shape();
    let r = shape.len();
    if r < 3 || shape[r - 1] != shape[r - 2] || shape[r - 2] != shape[r - 3] {
        return Err(Error::invalid("guidance mask", format!("expected cubic trailing axes, got {shape:?}")));
    }
    let side = shape[r - 1];
    let ratio = downsample_ratio(side, target_side).map_err(|_| Error::Resolution {
        expected: target_side,
        actual: side,
    })?;
    if ratio == 1 {
        return Ok(t.detach());
    }
    let lead: usize = shape[..r - 3].iter().product();
    let src = t.data();
    let mut out = Vec::with_capacity(lead * target_side.pow(3));
    for l in 0..lead {
        let base = l * side.pow(3);
        for d in 0..target_side {
            for h in 0..target_side {
                let row = base + ((d * ratio) * side + h * ratio) * side;
                out.extend((0..target_side).map(|w| src[row + w * ratio]));
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[r - 3..].fill(target_side);
    Ok(Tensor::from_vec(out_shape, out)?)
}

fn spatial_side<T: Real>(h: &Tensor<T>) -> Result<(usize, usize)> {
    match *h.shape() {
        [_, c, d, hh, w] if d == hh && hh == w => Ok((c, d)),
        _ => Err(Error::invalid("features", format!("expected [N, C, S, S, S], got {:?}", h.shape()))),
    }
}

fn modulate<T: Real>(h: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(h.mul(&gamma.add_scalar(T::one())?)?.add(beta)?)
}

/// Condition embedding block: two-layer MLP producing per-channel `γ, β`.
#[derive(Debug, Clone)]
pub struct Ceb<T: Real> {
    pub hidden: Linear<T>,
    pub gamma: Linear<T>,
    pub beta: Linear<T>,
}

impl<T: Real> Ceb<T> {
    pub fn new<R: Rng + ?Sized>(id: &str, cond_dim: usize, hidden: usize, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(&format!("{id}.hidden"), cond_dim, hidden, rng)?,
            gamma: Linear::zeroed(&format!("{id}.gamma"), hidden, channels),
            beta: Linear::zeroed(&format!("{id}.beta"), hidden, channels),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.out_features()
    }

    /// `h: [N, C, D, H, W]`, `c: [N, k]`.
    pub fn modulate(&self, h: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        let (channels, _) = spatial_side(h)?;
        let n = h.shape()[0];
        if channels != self.channels() || c.shape() != [n, self.hidden.in_features()] {
            return Err(Error::invalid(
                "condition block input",
                format!(
                    "features {:?} and condition {:?} do not fit a block with {} channels and {} inputs",
                    h.shape(),
                    c.shape(),
                    self.channels(),
                    self.hidden.in_features()
                ),
            ));
        }
        let a = leaky(&self.hidden.forward(c)?)?;
        let gamma = self.gamma.forward(&a)?.reshape(&[n, channels, 1, 1, 1])?;
        let beta = self.beta.forward(&a)?.reshape(&[n, channels, 1, 1, 1])?;
        modulate(h, &gamma, &beta)
    }
}

impl<T: Real> Module<T> for Ceb<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        [self.hidden.params(), self.gamma.params(), self.beta.params()].concat()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.hidden.params_mut();
        out.extend(self.gamma.params_mut());
        out.extend(self.beta.params_mut());
        out
    }
}

/// Mask embedding block: a shared convolution on the downsampled mask, then
/// two parallel convolutions producing voxelwise `γ, β`.
#[derive(Debug, Clone)]
pub struct Meb<T: Real> {
    pub shared: Conv3d<T>,
    pub gamma: Conv3d<T>,
    pub beta: Conv3d<T>,
}

impl<T: Real> Meb<T> {
    pub fn new<R: Rng + ?Sized>(id: &str, hidden: usize, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            shared: Conv3d::new(&format!("{id}.shared"), 1, hidden, 1, rng)?,
            gamma: Conv3d::zeroed(&format!("{id}.gamma"), hidden, channels, 1),
            beta: Conv3d::zeroed(&format!("{id}.beta"), hidden, channels, 1),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.out_channels()
    }

    /// Voxelwise `(γ, β)` for a `[N, 1, S, S, S]` mask brought down to `side`.
    pub fn fields(&self, mask: &Tensor<T>, side: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let m = downsample_nearest_tensor(mask, side)?;
        let a = leaky(&self.shared.forward(&m)?)?;
        Ok((self.gamma.forward(&a)?, self.beta.forward(&a)?))
    }

    /// `h: [N, C, D, D, D]`, `mask: [N, 1, S, S, S]` with `D` dividing `S`.
    pub fn modulate(&self, h: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        let (channels, side) = spatial_side(h)?;
        if channels != self.channels() {
            return Err(Error::invalid(
                "mask block input",
                format!("{channels} feature channels, block expects {}", self.channels()),
            ));
        }
        match *mask.shape() {
            [n, 1, ..] if n == h.shape()[0] => {}
            _ => {
                return Err(Error::invalid(
                    "guidance mask",
                    format!("shape {:?} does not match features {:?}", mask.shape(), h.shape()),
                ))
            }
        }
        let (gamma, beta) = self.fields(mask, side)?;
        modulate(h, &gamma, &beta)
    }
}

impl<T: Real> Module<T> for Meb<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        [self.shared.params(), self.gamma.params(), self.beta.params()].concat()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.shared.params_mut();
        out.extend(self.gamma.params_mut());
        out.extend(self.beta.params_mut());
        out
    }
}
