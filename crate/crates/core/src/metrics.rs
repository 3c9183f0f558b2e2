//! Synthesis quality (PSNR, SSIM, NMSE) and segmentation quality (Dice,
//! Jaccard, ASD, HD95) over 3D volumes. Distances are in voxel units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{flat_index, Dims, MaskVolume, Volume};

/// Reported when the mean squared error is below `PSNR_FLOOR_MSE`.
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_FLOOR_MSE: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_dims(what: &'static str, a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::invalid(what, format!("shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

/// `10·log10(range² / mse)`, capped at 100 dB.
pub fn psnr(reference: &Volume, test: &Volume, data_range: f64) -> Result<f64> {
    check_dims("psnr", reference.dims(), test.dims())?;
    let e = mse(reference.data(), test.data());
    if e < PSNR_FLOOR_MSE {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / e).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1D Gaussian taps of length `SSIM_WINDOW`.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.map(|t| t / total)
}

/// Valid-mode separable filtering along one axis.
fn filter_axis(src: &[f64], dims: Dims, axis: usize, taps: &[f64]) -> (Vec<f64>, Dims) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - taps.len();
    let mut out = vec![0.0; out_dims.iter().product()];
    for d in 0..out_dims[0] {
        for h in 0..out_dims[1] {
            for w in 0..out_dims[2] {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let mut p = [d, h, w];
                    p[axis] += k;
                    acc += t * src[flat_index(dims, p[0], p[1], p[2])];
                }
                out[flat_index(out_dims, d, h, w)] = acc;
            }
        }
    }
    (out, out_dims)
}

fn local_mean(src: &[f64], dims: Dims, taps: &[f64]) -> Vec<f64> {
    let (a, d) = filter_axis(src, dims, 0, taps);
    let (b, d) = filter_axis(&a, d, 1, taps);
    filter_axis(&b, d, 2, taps).0
}

/// Mean SSIM over all window positions that lie fully inside the volume,
/// with a 7³ Gaussian window (σ = 1.5) and data range 1.
pub fn ssim3d(reference: &Volume, test: &Volume) -> Result<f64> {
    check_dims("ssim", reference.dims(), test.dims())?;
    let dims = reference.dims();
    if dims.iter().any(|&s| s < SSIM_WINDOW) {
        return Err(Error::invalid(
            "ssim",
            format!("volume {dims:?} is smaller than the {SSIM_WINDOW}³ window"),
        ));
    }
    let x: Vec<f64> = reference.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = test.data().iter().map(|&v| v as f64).collect();
    let taps = ssim_taps();
    let product = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = local_mean(&x, dims, &taps);
    let my = local_mean(&y, dims, &taps);
    let mxx = local_mean(&product(&x, &x), dims, &taps);
    let myy = local_mean(&product(&y, &y), dims, &taps);
    let mxy = local_mean(&product(&x, &y), dims, &taps);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (vx, vy, cov) = (mxx[i] - mx[i] * mx[i], myy[i] - my[i] * my[i], mxy[i] - mx[i] * my[i]);
            ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// `100 · Σ(test − ref)² / Σ ref²`.
pub fn nmse(reference: &Volume, test: &Volume) -> Result<f64> {
    check_dims("nmse", reference.dims(), test.dims())?;
    let energy: f64 = reference.data().iter().map(|&v| (v as f64).powi(2)).sum();
    if energy == 0.0 {
        return Err(Error::invalid("nmse", "reference is all zero"));
    }
    let err: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&r, &t)| (t as f64 - r as f64).powi(2))
        .sum();
    Ok(100.0 * err / energy)
}

fn overlap(a: &MaskVolume, b: &MaskVolume) -> Result<(usize, usize, usize)> {
    check_dims("mask overlap", a.dims(), b.dims())?;
    let inter = a.data().iter().zip(b.data()).filter(|(&p, &q)| p == 1 && q == 1).count();
    Ok((inter, a.count(), b.count()))
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn jaccard(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Boundary voxels of a mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurfaceSet {
    pub dims: Dims,
    pub points: Vec<[usize; 3]>,
}

/// Foreground voxels with at least one background 6-neighbour; the region
/// outside the volume counts as background.
pub fn surface(mask: &MaskVolume) -> SurfaceSet {
    let dims = mask.dims();
    let mut points = Vec::new();
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                if !mask.get(d, h, w) {
                    continue;
                }
                let p = [d, h, w];
                let exposed = (0..3).any(|axis| {
                    let lo = p[axis] == 0 || {
                        let mut q = p;
                        q[axis] -= 1;
                        !mask.get(q[0], q[1], q[2])
                    };
                    let hi = p[axis] + 1 == dims[axis] || {
                        let mut q = p;
                        q[axis] += 1;
                        !mask.get(q[0], q[1], q[2])
                    };
                    lo || hi
                });
                if exposed {
                    points.push(p);
                }
            }
        }
    }
    SurfaceSet { dims, points }
}

/// Exact squared Euclidean distance of a 1D sampled function's lower
/// envelope of parabolas (Felzenszwalb and Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[k]].is_infinite() {
            v[k] = q;
            continue;
        }
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            (q as f64 - p as f64).powi(2) + f[p]
        };
    }
}

/// Squared distance from every voxel to the nearest listed point.
fn squared_distance_field(points: &SurfaceSet) -> Vec<f64> {
    let dims = points.dims;
    let mut field = vec![f64::INFINITY; dims.iter().product()];
    for p in &points.points {
        field[flat_index(dims, p[0], p[1], p[2])] = 0.0;
    }
    let longest = *dims.iter().max().unwrap_or(&0);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for axis in 0..3 {
        let n = dims[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for i in 0..dims[a] {
            for j in 0..dims[b] {
                let at = |k: usize| {
                    let mut p = [0; 3];
                    p[axis] = k;
                    p[a] = i;
                    p[b] = j;
                    flat_index(dims, p[0], p[1], p[2])
                };
                for k in 0..n {
                    line[k] = field[at(k)];
                }
                edt_1d(&line[..n], &mut out[..n], &mut v, &mut z);
                for k in 0..n {
                    field[at(k)] = out[k];
                }
            }
        }
    }
    field
}

/// The symmetric multiset of surface-to-surface distances, sorted.
pub fn surface_distances(a: &MaskVolume, b: &MaskVolume) -> Result<Vec<f64>> {
    check_dims("surface distance", a.dims(), b.dims())?;
    if a.is_empty() {
        return Err(Error::UndefinedDistance("first"));
    }
    if b.is_empty() {
        return Err(Error::UndefinedDistance("second"));
    }
    let (sa, sb) = (surface(a), surface(b));
    let (fa, fb) = (squared_distance_field(&sa), squared_distance_field(&sb));
    let dims = a.dims();
    let mut out: Vec<f64> = sa
        .points
        .iter()
        .map(|p| fb[flat_index(dims, p[0], p[1], p[2])].sqrt())
        .chain(sb.points.iter().map(|q| fa[flat_index(dims, q[0], q[1], q[2])].sqrt()))
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Nearest-rank percentile of a sorted, non-empty slice.
pub fn nearest_rank(sorted: &[f64], percent: f64) -> f64 {
    let rank = ((percent / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Average symmetric surface distance.
pub fn asd(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    let d = surface_distances(a, b)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// 95th percentile (nearest rank) of the symmetric surface distances.
pub fn hd95(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    Ok(nearest_rank(&surface_distances(a, b)?, 95.0))
}

/// Fixed-schema report. Entries that do not apply serialize as `null`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub nmse_pct: Option<f64>,
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub asd_vox: Option<f64>,
    pub hd95_vox: Option<f64>,
}

impl MetricsReport {
    pub fn synthesis(reference: &Volume, test: &Volume) -> Result<Self> {
        Ok(Self {
            psnr_db: Some(psnr(reference, test, 1.0)?),
            ssim: Some(ssim3d(reference, test)?),
            nmse_pct: Some(nmse(reference, test)?),
            ..Self::default()
        })
    }

    pub fn segmentation(truth: &MaskVolume, predicted: &MaskVolume) -> Result<Self> {
        let d = surface_distances(truth, predicted)?;
        Ok(Self {
            dice: Some(dice(truth, predicted)?),
            jaccard: Some(jaccard(truth, predicted)?),
            asd_vox: Some(d.iter().sum::<f64>() / d.len() as f64),
            hd95_vox: Some(nearest_rank(&d, 95.0)),
            ..Self::default()
        })
    }

    /// Segmentation metrics that stay defined when a prediction is empty:
    /// overlap scores are computed as usual and the distances fall back to
    /// the volume diagonal.
    pub fn segmentation_lenient(truth: &MaskVolume, predicted: &MaskVolume) -> Result<Self> {
        match Self::segmentation(truth, predicted) {
            Err(Error::UndefinedDistance(_)) => {
                let diag = truth.dims().iter().map(|&s| (s * s) as f64).sum::<f64>().sqrt();
                Ok(Self {
                    dice: Some(dice(truth, predicted)?),
                    jaccard: Some(jaccard(truth, predicted)?),
                    asd_vox: Some(diag),
                    hd95_vox: Some(diag),
                    ..Self::default()
                })
            }
            other => other,
        }
    }

    /// Entrywise mean over reports; an entry is kept when every report has it.
    pub fn mean(reports: &[MetricsReport]) -> Self {
        let avg = |f: fn(&MetricsReport) -> Option<f64>| {
            let vals: Option<Vec<f64>> = reports.iter().map(f).collect();
            vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            psnr_db: avg(|r| r.psnr_db),
            ssim: avg(|r| r.ssim),
            nmse_pct: avg(|r| r.nmse_pct),
            dice: avg(|r| r.dice),
            jaccard: avg(|r| r.jaccard),
            asd_vox: avg(|r| r.asd_vox),
            hd95_vox: avg(|r| r.hd95_vox),
        }
    }
}
