//! Plain 3D volumes: real-valued images and binary masks.
//!
//! Voxel `(d, h, w)` lives at flat index `(d·H + h)·W + w`.

use pavae_autograd::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

#[inline]
pub fn flat_index(dims: Dims, d: usize, h: usize, w: usize) -> usize {
    (d * dims[1] + h) * dims[2] + w
}

/// Real-valued 3D image (lesion cubes, host volumes, synthetic outputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    dims: Dims,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if voxel_count(dims) != data.len() {
            return Err(Error::invalid(
                "volume",
                format!("{} values for dims {dims:?}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Self {
            dims,
            data: vec![value; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Side length when the volume is a cube.
    pub fn side(&self) -> Option<usize> {
        let [d, h, w] = self.dims;
        (d == h && h == w).then_some(d)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[flat_index(self.dims, d, h, w)]
    }

    /// Copies the `dims`-sized block starting at `origin`.
    pub fn crop(&self, origin: Dims, dims: Dims) -> Result<Volume> {
        check_fits(origin, dims, self.dims)?;
        let mut out = Vec::with_capacity(voxel_count(dims));
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                let start = flat_index(self.dims, origin[0] + d, origin[1] + h, origin[2]);
                out.extend_from_slice(&self.data[start..start + dims[2]]);
            }
        }
        Volume::new(dims, out)
    }
}

pub(crate) fn check_fits(origin: Dims, inner: Dims, outer: Dims) -> Result<()> {
    for axis in 0..3 {
        if origin[axis] + inner[axis] > outer[axis] {
            return Err(Error::invalid(
                "origin",
                format!("block {inner:?} at {origin:?} exceeds volume {outer:?}"),
            ));
        }
    }
    Ok(())
}

/// Strictly binary 3D mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVolume {
    dims: Dims,
    data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if voxel_count(dims) != data.len() {
            return Err(Error::invalid(
                "mask",
                format!("{} values for dims {dims:?}", data.len()),
            ));
        }
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NotBinary {
                index,
                value: v as f64,
            });
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0; voxel_count(dims)],
        }
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![1; voxel_count(dims)],
        }
    }

    /// Thresholds a real volume: voxels strictly above `threshold` become 1.
    pub fn from_threshold(volume: &Volume, threshold: f32) -> Self {
        Self {
            dims: volume.dims,
            data: volume.data.iter().map(|&v| u8::from(v > threshold)).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn side(&self) -> Option<usize> {
        let [d, h, w] = self.dims;
        (d == h && h == w).then_some(d)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.data[flat_index(self.dims, d, h, w)] == 1
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, on: bool) {
        let i = flat_index(self.dims, d, h, w);
        self.data[i] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Stacks equally sized volumes into a `[N, 1, D, H, W]` tensor.
pub fn stack_volumes<T: Real>(volumes: &[&Volume]) -> Result<Tensor<T>> {
    let dims = volumes
        .first()
        .ok_or_else(|| Error::invalid("batch", "no volumes"))?
        .dims;
    let mut data = Vec::with_capacity(volumes.len() * voxel_count(dims));
    for v in volumes {
        if v.dims != dims {
            return Err(Error::invalid("batch", format!("mixed dims {:?} and {dims:?}", v.dims)));
        }
        data.extend(v.data.iter().map(|&x| T::from_f64_lossy(x as f64)));
    }
    let [d, h, w] = dims;
    Ok(Tensor::from_vec(vec![volumes.len(), 1, d, h, w], data)?)
}

/// Stacks masks as 0/1 reals into a `[N, 1, D, H, W]` tensor.
pub fn stack_masks<T: Real>(masks: &[&MaskVolume]) -> Result<Tensor<T>> {
    let dims = masks
        .first()
        .ok_or_else(|| Error::invalid("batch", "no masks"))?
        .dims;
    let mut data = Vec::with_capacity(masks.len() * voxel_count(dims));
    for m in masks {
        if m.dims != dims {
            return Err(Error::invalid("batch", format!("mixed dims {:?} and {dims:?}", m.dims)));
        }
        data.extend(m.data.iter().map(|&x| if x == 1 { T::one() } else { T::zero() }));
    }
    let [d, h, w] = dims;
    Ok(Tensor::from_vec(vec![masks.len(), 1, d, h, w], data)?)
}

/// Splits a `[N, 1, D, H, W]` tensor back into volumes.
pub fn unstack_volumes<T: Real>(t: &Tensor<T>) -> Result<Vec<Volume>> {
    let &[n, 1, d, h, w] = t.shape() else {
        return Err(Error::invalid("batch", format!("expected [N,1,D,H,W], got {:?}", t.shape())));
    };
    let per = d * h * w;
    Ok((0..n)
        .map(|i| Volume {
            dims: [d, h, w],
            data: t.data()[i * per..(i + 1) * per]
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect(),
        })
        .collect())
}

/// Separable Gaussian blur with a kernel truncated at `⌈3σ⌉` and normalized
/// to unit sum; voxels outside the volume count as zero.
pub fn gaussian_blur(values: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut cur = values.to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let extent = dims[axis] as isize;
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as isize;
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let q = pos + k as isize - radius;
                if q >= 0 && q < extent {
                    let j = (i as isize + (q - pos) * stride as isize) as usize;
                    acc += wk * cur[j];
                }
            }
            *out = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}
