//! 3D cross-correlation and its two adjoints, computed directly as
//! scaled line additions (stride 1 runs are contiguous and vectorize).

use crate::error::{Result, TensorError};
use crate::op::{ConvParams, Op};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[batch, c_in, d, h, w], &[c_out, kc, kd, kh, kw]) = (input, kernel) else {
            return Err(TensorError::InvalidArgument {
                op: "conv3d",
                reason: format!("expected rank-5 input and kernel, got {input:?} and {kernel:?}"),
            });
        };
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv3d",
                reason: "stride must be positive".into(),
            });
        }
        if kc != c_in {
            return Err(TensorError::ChannelMismatch {
                input: c_in,
                kernel: kc,
            });
        }
        let spatial = [d, h, w];
        let ks = [kd, kh, kw];
        let mut output = [0; 3];
        for axis in 0..3 {
            let padded = spatial[axis] + 2 * pad;
            if ks[axis] == 0 || padded < ks[axis] {
                return Err(TensorError::NonPositiveExtent { axis: axis + 2 });
            }
            output[axis] = (padded - ks[axis]) / stride + 1;
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            input: spatial,
            kernel: ks,
            output,
            stride,
            pad,
        })
    }

    fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn output_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn input_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.input;
        vec![self.batch, self.c_in, d, h, w]
    }

    fn output_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.output;
        vec![self.batch, self.c_out, d, h, w]
    }

    fn kernel_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.kernel;
        vec![self.c_out, self.c_in, d, h, w]
    }

    /// Output positions `o` along one axis whose source index
    /// `o * stride + tap - pad` falls inside `[0, extent)`.
    fn valid(&self, tap: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let tap = tap as isize;
        let lo = if p > tap { (p - tap + s - 1) / s } else { 0 };
        let last = extent as isize - 1 + p - tap;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(out as isize) };
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    /// Valid output ranges of every tap along the three spatial axes.
    fn tap_ranges(&self) -> [Vec<(usize, usize)>; 3] {
        [0, 1, 2].map(|axis| {
            (0..self.kernel[axis])
                .map(|t| self.valid(t, self.input[axis], self.output[axis]))
                .collect()
        })
    }

    /// Source index of output position `o` for tap `t` (only meaningful
    /// inside the tap's valid range).
    /// Kernel 3³, stride 1, padding 1 on lines of at least two voxels: the
    /// three innermost taps can be fused into one pass per line.
    fn fused_rows(&self) -> bool {
        self.kernel == [3, 3, 3] && self.stride == 1 && self.pad == 1 && self.input[2] >= 2
    }

    /// Kernel 3³, stride 2, padding 1: handled on even/odd split rows.
    fn split_rows(&self) -> bool {
        self.kernel == [3, 3, 3] && self.stride == 2 && self.pad == 1
    }

    fn strided_shape(&self) -> strided::Shape {
        strided::Shape {
            input: self.input,
            output: self.output,
            c_in: self.c_in,
            c_out: self.c_out,
        }
    }

    fn source(&self, o: usize, t: usize) -> usize {
        o * self.stride + t - self.pad
    }

    /// Visits every pair of (output line, input line) linked by the taps
    /// `(a, b)`, then lets `f` handle the innermost axis with the valid
    /// ranges of each `e` tap.
    fn for_each_line_pair(
        &self,
        ranges: &[Vec<(usize, usize)>; 3],
        mut f: impl FnMut(usize, usize, usize),
    ) {
        let [_, h, w] = self.input;
        let [_, oh, ow] = self.output;
        let [kd, kh, _] = self.kernel;
        for a in 0..kd {
            let (dlo, dhi) = ranges[0][a];
            for zd in dlo..dhi {
                let id = self.source(zd, a);
                for b in 0..kh {
                    let (hlo, hhi) = ranges[1][b];
                    for zh in hlo..hhi {
                        let ih = self.source(zh, b);
                        f((a * kh + b) * self.kernel[2], (zd * oh + zh) * ow, (id * h + ih) * w);
                    }
                }
            }
        }
    }
}

/// `dst[k] += alpha * src[k]` over equal-length slices.
#[inline]
fn axpy<T: Real>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `dst[x] += w0·src[x−1] + w1·src[x] + w2·src[x+1]` over equal-length
/// lines (at least 2 long), treating out-of-line samples as zero.
#[inline]
fn row3<T: Real>(dst: &mut [T], src: &[T], [w0, w1, w2]: [T; 3]) {
    let n = dst.len();
    dst[0] += w1 * src[0] + w2 * src[1];
    dst[n - 1] += w0 * src[n - 2] + w1 * src[n - 1];
    let mid = &mut dst[1..n - 1];
    for (((d, &l), &c), &r) in mid.iter_mut().zip(&src[..n - 2]).zip(&src[1..n - 1]).zip(&src[2..]) {
        *d += w0 * l + w1 * c + w2 * r;
    }
}

/// The three shifted dot products `Σ gy[x]·src[x + e − 1]`, `e = 0, 1, 2`,
/// over equal-length lines (at least 2 long) with zero padding.
#[inline]
fn dot3<T: Real>(gy: &[T], src: &[T]) -> [T; 3] {
    let n = gy.len();
    [
        dot(&gy[1..], &src[..n - 1]),
        dot(gy, src),
        dot(&gy[..n - 1], &src[1..]),
    ]
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Source index `o + t − 1` of a padding-1 tap, if inside `[0, extent)`.
#[inline]
fn shifted(o: usize, t: usize, extent: usize) -> Option<usize> {
    (o + t).checked_sub(1).filter(|&i| i < extent)
}

/// Stride-1, padding-1, 3³ kernels for one sample. Output lines stay hot
/// while every input channel and tap row is added into them.
mod fused {
    use super::{dot3, row3, shifted, Real};

    pub(super) fn forward<T: Real>(dims: [usize; 3], c_in: usize, c_out: usize, x: &[T], k: &[T], out: &mut [T]) {
        let [d, h, w] = dims;
        let v = d * h * w;
        for co in 0..c_out {
            for zd in 0..d {
                for zh in 0..h {
                    let dst = &mut out[co * v + (zd * h + zh) * w..][..w];
                    for ci in 0..c_in {
                        let src = &x[ci * v..][..v];
                        let wk = &k[(co * c_in + ci) * 27..][..27];
                        for a in 0..3 {
                            let Some(id) = shifted(zd, a, d) else { continue };
                            for b in 0..3 {
                                let Some(ih) = shifted(zh, b, h) else { continue };
                                let t = (a * 3 + b) * 3;
                                row3(dst, &src[(id * h + ih) * w..][..w], [wk[t], wk[t + 1], wk[t + 2]]);
                            }
                        }
                    }
                }
            }
        }
    }

    pub(super) fn input_grad<T: Real>(dims: [usize; 3], c_in: usize, c_out: usize, gy: &[T], k: &[T], out: &mut [T]) {
        let [d, h, w] = dims;
        let v = d * h * w;
        for ci in 0..c_in {
            for id in 0..d {
                for ih in 0..h {
                    let dst = &mut out[ci * v + (id * h + ih) * w..][..w];
                    for co in 0..c_out {
                        let src = &gy[co * v..][..v];
                        let wk = &k[(co * c_in + ci) * 27..][..27];
                        for a in 0..3 {
                            let Some(zd) = shifted(id, 2 - a, d) else { continue };
                            for b in 0..3 {
                                let Some(zh) = shifted(ih, 2 - b, h) else { continue };
                                let t = (a * 3 + b) * 3;
                                row3(dst, &src[(zd * h + zh) * w..][..w], [wk[t + 2], wk[t + 1], wk[t]]);
                            }
                        }
                    }
                }
            }
        }
    }

    pub(super) fn weight_grad<T: Real>(dims: [usize; 3], c_in: usize, c_out: usize, x: &[T], gy: &[T], out: &mut [T]) {
        let [d, h, w] = dims;
        let v = d * h * w;
        for co in 0..c_out {
            let g = &gy[co * v..][..v];
            for ci in 0..c_in {
                let src = &x[ci * v..][..v];
                let acc = &mut out[(co * c_in + ci) * 27..][..27];
                for zd in 0..d {
                    for zh in 0..h {
                        let line = &g[(zd * h + zh) * w..][..w];
                        for a in 0..3 {
                            let Some(id) = shifted(zd, a, d) else { continue };
                            for b in 0..3 {
                                let Some(ih) = shifted(zh, b, h) else { continue };
                                let t = (a * 3 + b) * 3;
                                let s = dot3(line, &src[(id * h + ih) * w..][..w]);
                                acc[t] += s[0];
                                acc[t + 1] += s[1];
                                acc[t + 2] += s[2];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-2, padding-1, 3³ kernels for one sample. Input rows are split
/// into even and odd halves (`[E | O]`), which turns the strided innermost
/// taps into contiguous runs: `out[x] += w0·O[x−1] + w1·E[x] + w2·O[x]`.
mod strided {
    use super::{axpy, dot, Real};

    /// Rows rearranged as even samples followed by odd samples.
    pub(super) fn split_rows<T: Real>(data: &[T], w: usize) -> Vec<T> {
        let ne = w.div_ceil(2);
        let mut out = vec![T::zero(); data.len()];
        for (src, dst) in data.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            for (i, &v) in src.iter().enumerate() {
                dst[if i % 2 == 0 { i / 2 } else { ne + i / 2 }] = v;
            }
        }
        out
    }

    pub(super) fn merge_rows<T: Real>(split: &[T], w: usize, out: &mut [T]) {
        let ne = w.div_ceil(2);
        for (src, dst) in split.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = src[if i % 2 == 0 { i / 2 } else { ne + i / 2 }];
            }
        }
    }

    /// Source index `2·o + t − 1`, if inside `[0, extent)`.
    #[inline]
    fn source(o: usize, t: usize, extent: usize) -> Option<usize> {
        (2 * o + t).checked_sub(1).filter(|&i| i < extent)
    }

    pub(super) struct Shape {
        pub input: [usize; 3],
        pub output: [usize; 3],
        pub c_in: usize,
        pub c_out: usize,
    }

    impl Shape {
        fn halves(&self) -> (usize, usize, usize) {
            let w = self.input[2];
            let (ne, no) = (w.div_ceil(2), w / 2);
            (ne, no, no.min(self.output[2] - 1))
        }

        /// Calls `f(out_line, in_row)` for every valid `(a, b)` tap pair.
        fn for_each_pair(&self, zd: usize, zh: usize, mut f: impl FnMut(usize, usize)) {
            let [d, h, w] = self.input;
            for a in 0..3 {
                let Some(id) = source(zd, a, d) else { continue };
                for b in 0..3 {
                    let Some(ih) = source(zh, b, h) else { continue };
                    f((a * 3 + b) * 3, (id * h + ih) * w);
                }
            }
        }
    }

    pub(super) fn forward<T: Real>(s: &Shape, xs: &[T], k: &[T], out: &mut [T]) {
        let [_, oh, ow] = s.output;
        let (v, p) = (s.input.iter().product::<usize>(), s.output.iter().product::<usize>());
        let (ne, no, n0) = s.halves();
        for co in 0..s.c_out {
            for zd in 0..s.output[0] {
                for zh in 0..oh {
                    let dst = &mut out[co * p + (zd * oh + zh) * ow..][..ow];
                    for ci in 0..s.c_in {
                        let src = &xs[ci * v..][..v];
                        let wk = &k[(co * s.c_in + ci) * 27..][..27];
                        s.for_each_pair(zd, zh, |t, row| {
                            let (e, o) = src[row..row + ne + no].split_at(ne);
                            axpy(&mut dst[..ne], wk[t + 1], e);
                            axpy(&mut dst[..no], wk[t + 2], o);
                            axpy(&mut dst[1..1 + n0], wk[t], &o[..n0]);
                        });
                    }
                }
            }
        }
    }

    /// Accumulates into the split layout; the caller merges rows.
    pub(super) fn input_grad<T: Real>(s: &Shape, gy: &[T], k: &[T], out_split: &mut [T]) {
        let [_, oh, ow] = s.output;
        let (v, p) = (s.input.iter().product::<usize>(), s.output.iter().product::<usize>());
        let (ne, no, n0) = s.halves();
        for ci in 0..s.c_in {
            let dst = &mut out_split[ci * v..][..v];
            for co in 0..s.c_out {
                let wk = &k[(co * s.c_in + ci) * 27..][..27];
                for zd in 0..s.output[0] {
                    for zh in 0..oh {
                        let g = &gy[co * p + (zd * oh + zh) * ow..][..ow];
                        s.for_each_pair(zd, zh, |t, row| {
                            let (e, o) = dst[row..row + ne + no].split_at_mut(ne);
                            axpy(e, wk[t + 1], &g[..ne]);
                            axpy(o, wk[t + 2], &g[..no]);
                            axpy(&mut o[..n0], wk[t], &g[1..1 + n0]);
                        });
                    }
                }
            }
        }
    }

    pub(super) fn weight_grad<T: Real>(s: &Shape, xs: &[T], gy: &[T], out: &mut [T]) {
        let [_, oh, ow] = s.output;
        let (v, p) = (s.input.iter().product::<usize>(), s.output.iter().product::<usize>());
        let (ne, no, n0) = s.halves();
        for co in 0..s.c_out {
            for ci in 0..s.c_in {
                let src = &xs[ci * v..][..v];
                let acc = &mut out[(co * s.c_in + ci) * 27..][..27];
                for zd in 0..s.output[0] {
                    for zh in 0..oh {
                        let g = &gy[co * p + (zd * oh + zh) * ow..][..ow];
                        s.for_each_pair(zd, zh, |t, row| {
                            let (e, o) = src[row..row + ne + no].split_at(ne);
                            acc[t + 1] += dot(&g[..ne], e);
                            acc[t + 2] += dot(&g[..no], o);
                            acc[t] += dot(&g[1..1 + n0], &o[..n0]);
                        });
                    }
                }
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// 3D cross-correlation without bias.
    ///
    /// `self` is `[N, C_in, D, H, W]`, `kernel` is `[C_out, C_in, kd, kh, kw]`;
    /// each output extent is `⌊(D + 2·pad − kd)/stride⌋ + 1`.
    pub fn conv3d(&self, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let g = Geometry::new(&self.shape, &kernel.shape, stride, pad)?;
        let (p, v, kv) = (g.output_volume(), g.input_volume(), g.kernel_volume());
        let ranges = g.tap_ranges();
        let fused = g.fused_rows();
        let mut out = vec![T::zero(); g.batch * g.c_out * p];
        for n in 0..g.batch {
            if fused {
                let x = &self.data[n * g.c_in * v..][..g.c_in * v];
                let o = &mut out[n * g.c_out * p..][..g.c_out * p];
                fused::forward(g.input, g.c_in, g.c_out, x, &kernel.data, o);
                continue;
            }
            if g.split_rows() {
                let xs = strided::split_rows(&self.data[n * g.c_in * v..][..g.c_in * v], g.input[2]);
                let o = &mut out[n * g.c_out * p..][..g.c_out * p];
                strided::forward(&g.strided_shape(), &xs, &kernel.data, o);
                continue;
            }
            for co in 0..g.c_out {
                let dst = &mut out[(n * g.c_out + co) * p..][..p];
                for ci in 0..g.c_in {
                    let src = &self.data[(n * g.c_in + ci) * v..][..v];
                    let wk = &kernel.data[(co * g.c_in + ci) * kv..][..kv];
                    g.for_each_line_pair(&ranges, |tap, out_line, in_line| {
                        for (e, &(lo, hi)) in ranges[2].iter().enumerate() {
                            if lo >= hi {
                                continue;
                            }
                            let wv = wk[tap + e];
                            let start = in_line + g.source(lo, e);
                            let d = &mut dst[out_line + lo..out_line + hi];
                            if stride == 1 {
                                axpy(d, wv, &src[start..start + (hi - lo)]);
                            } else {
                                for (k, o) in d.iter_mut().enumerate() {
                                    *o += wv * src[start + k * stride];
                                }
                            }
                        }
                    });
                }
            }
        }
        Tensor::record(
            Op::Conv(ConvParams { stride, pad }),
            &[self, kernel],
            g.output_shape(),
            out,
        )
    }

    /// Adjoint of [`Tensor::conv3d`] in its input: maps an output-shaped
    /// gradient (`self`) back to `input_shape`.
    pub fn conv3d_input_grad(
        &self,
        kernel: &Tensor<T>,
        input_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let g = Geometry::new(input_shape, &kernel.shape, stride, pad)?;
        if self.shape != g.output_shape() {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d_input_grad",
                lhs: self.shape.clone(),
                rhs: g.output_shape(),
            });
        }
        let (p, v, kv) = (g.output_volume(), g.input_volume(), g.kernel_volume());
        let ranges = g.tap_ranges();
        let fused = g.fused_rows();
        let mut out = vec![T::zero(); g.batch * g.c_in * v];
        for n in 0..g.batch {
            if fused {
                let gy = &self.data[n * g.c_out * p..][..g.c_out * p];
                let o = &mut out[n * g.c_in * v..][..g.c_in * v];
                fused::input_grad(g.input, g.c_in, g.c_out, gy, &kernel.data, o);
                continue;
            }
            if g.split_rows() {
                let gy = &self.data[n * g.c_out * p..][..g.c_out * p];
                let mut split = vec![T::zero(); g.c_in * v];
                strided::input_grad(&g.strided_shape(), gy, &kernel.data, &mut split);
                strided::merge_rows(&split, g.input[2], &mut out[n * g.c_in * v..][..g.c_in * v]);
                continue;
            }
            for ci in 0..g.c_in {
                let dst = &mut out[(n * g.c_in + ci) * v..][..v];
                for co in 0..g.c_out {
                    let src = &self.data[(n * g.c_out + co) * p..][..p];
                    let wk = &kernel.data[(co * g.c_in + ci) * kv..][..kv];
                    g.for_each_line_pair(&ranges, |tap, out_line, in_line| {
                        for (e, &(lo, hi)) in ranges[2].iter().enumerate() {
                            if lo >= hi {
                                continue;
                            }
                            let wv = wk[tap + e];
                            let start = in_line + g.source(lo, e);
                            let s = &src[out_line + lo..out_line + hi];
                            if stride == 1 {
                                axpy(&mut dst[start..start + (hi - lo)], wv, s);
                            } else {
                                for (k, &gy) in s.iter().enumerate() {
                                    dst[start + k * stride] += wv * gy;
                                }
                            }
                        }
                    });
                }
            }
        }
        let params = ConvParams { stride, pad };
        Tensor::record(
            Op::ConvInputGrad(params, g.input_shape()),
            &[self, kernel],
            g.input_shape(),
            out,
        )
    }

    /// Adjoint of [`Tensor::conv3d`] in its kernel: correlates the input
    /// (`self`) with an output-shaped gradient, producing `kernel_shape`.
    pub fn conv3d_weight_grad(
        &self,
        grad_output: &Tensor<T>,
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let g = Geometry::new(&self.shape, kernel_shape, stride, pad)?;
        if grad_output.shape != g.output_shape() {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d_weight_grad",
                lhs: grad_output.shape.clone(),
                rhs: g.output_shape(),
            });
        }
        let (p, v, kv) = (g.output_volume(), g.input_volume(), g.kernel_volume());
        let ranges = g.tap_ranges();
        let fused = g.fused_rows();
        let mut out = vec![T::zero(); g.c_out * g.c_in * kv];
        let mut gather = Vec::with_capacity(g.output[2]);
        for n in 0..g.batch {
            if fused {
                let x = &self.data[n * g.c_in * v..][..g.c_in * v];
                let gy = &grad_output.data[n * g.c_out * p..][..g.c_out * p];
                fused::weight_grad(g.input, g.c_in, g.c_out, x, gy, &mut out);
                continue;
            }
            if g.split_rows() {
                let xs = strided::split_rows(&self.data[n * g.c_in * v..][..g.c_in * v], g.input[2]);
                let gy = &grad_output.data[n * g.c_out * p..][..g.c_out * p];
                strided::weight_grad(&g.strided_shape(), &xs, gy, &mut out);
                continue;
            }
            for co in 0..g.c_out {
                let gy = &grad_output.data[(n * g.c_out + co) * p..][..p];
                for ci in 0..g.c_in {
                    let x = &self.data[(n * g.c_in + ci) * v..][..v];
                    let acc = &mut out[(co * g.c_in + ci) * kv..][..kv];
                    g.for_each_line_pair(&ranges, |tap, out_line, in_line| {
                        for (e, &(lo, hi)) in ranges[2].iter().enumerate() {
                            if lo >= hi {
                                continue;
                            }
                            let start = in_line + g.source(lo, e);
                            let s = &gy[out_line + lo..out_line + hi];
                            acc[tap + e] += if stride == 1 {
                                dot(s, &x[start..start + (hi - lo)])
                            } else {
                                gather.clear();
                                gather.extend((0..hi - lo).map(|k| x[start + k * stride]));
                                dot(s, &gather)
                            };
                        }
                    });
                }
            }
        }
        let params = ConvParams { stride, pad };
        Tensor::record(
            Op::ConvWeightGrad(params, g.kernel_shape()),
            &[self, grad_output],
            g.kernel_shape(),
            out,
        )
    }
}
