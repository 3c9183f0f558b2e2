use crate::error::{Result, TensorError};
use crate::op::Op;
use crate::real::Real;
use crate::tensor::Tensor;

fn split_spatial(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
    if shape.len() < 3 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("need at least 3 axes, got shape {shape:?}"),
        });
    }
    let r = shape.len();
    let lead = shape[..r - 3].iter().product();
    Ok((lead, [shape[r - 3], shape[r - 2], shape[r - 1]]))
}

impl<T: Real> Tensor<T> {
    /// Nearest-neighbour upsampling of the last three axes: every voxel is
    /// replicated into a `factor³` block.
    pub fn upsample3d(&self, factor: usize) -> Result<Tensor<T>> {
        if factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample3d",
                reason: "factor must be at least 1".into(),
            });
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (lead, [d, h, w]) = split_spatial("upsample3d", &self.shape)?;
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let mut out = vec![T::zero(); lead * od * oh * ow];
        for l in 0..lead {
            let src = &self.data[l * d * h * w..(l + 1) * d * h * w];
            let dst = &mut out[l * od * oh * ow..(l + 1) * od * oh * ow];
            for z in 0..od {
                for y in 0..oh {
                    let s = &src[((z / factor) * h + y / factor) * w..][..w];
                    let line = &mut dst[(z * oh + y) * ow..][..ow];
                    for (x, v) in line.iter_mut().enumerate() {
                        *v = s[x / factor];
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 3..].copy_from_slice(&[od, oh, ow]);
        Tensor::record(Op::Upsample(factor), &[self], shape, out)
    }

    /// Sums non-overlapping `factor³` blocks of the last three axes. Adjoint
    /// of [`Tensor::upsample3d`].
    pub fn block_sum3d(&self, factor: usize) -> Result<Tensor<T>> {
        if factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: "block_sum3d",
                reason: "factor must be at least 1".into(),
            });
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (lead, [d, h, w]) = split_spatial("block_sum3d", &self.shape)?;
        if d % factor != 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::InvalidArgument {
                op: "block_sum3d",
                reason: format!("extents {:?} not divisible by {factor}", [d, h, w]),
            });
        }
        let (od, oh, ow) = (d / factor, h / factor, w / factor);
        let mut out = vec![T::zero(); lead * od * oh * ow];
        for l in 0..lead {
            let src = &self.data[l * d * h * w..(l + 1) * d * h * w];
            let dst = &mut out[l * od * oh * ow..(l + 1) * od * oh * ow];
            for z in 0..d {
                for y in 0..h {
                    let line = &src[(z * h + y) * w..][..w];
                    let acc = &mut dst[((z / factor) * oh + y / factor) * ow..][..ow];
                    for (x, &v) in line.iter().enumerate() {
                        acc[x / factor] += v;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 3..].copy_from_slice(&[od, oh, ow]);
        Tensor::record(Op::BlockSum(factor), &[self], shape, out)
    }
}
