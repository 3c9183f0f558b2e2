//! Procedural lesion phantoms: ellipsoid-union masks, blurred bright lesions
//! on a noisy background, and the larger host volumes they are cut from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{check_fits, flat_index, gaussian_blur, voxel_count, Dims, MaskVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub side: usize,
    pub count: usize,
    /// Inclusive range of ellipsoids per lesion.
    pub ellipsoids: (usize, usize),
    /// Range of ellipsoid semi-axes, in voxels.
    pub radius: (f64, f64),
    pub lesion_mean: f64,
    pub background_mean: f64,
    pub noise_std: f64,
    pub blur_sigma: f64,
    /// Peak deviation of the linear intensity ramp across the lesion.
    pub ramp: f64,
    /// Host side as a multiple of the cube side.
    pub host_scale: f64,
}

impl PhantomSpec {
    pub fn for_side(side: usize, count: usize) -> Self {
        Self {
            side,
            count,
            ellipsoids: (1, 3),
            radius: (side as f64 / 8.0, side as f64 / 4.0),
            lesion_mean: 0.8,
            background_mean: 0.3,
            noise_std: 0.05,
            blur_sigma: 1.0,
            ramp: 0.1,
            host_scale: 1.5,
        }
    }

    /// Largest offset of an ellipsoid centre from the cube centre.
    pub fn jitter(&self) -> f64 {
        self.side as f64 / 16.0
    }

    pub fn host_side(&self) -> usize {
        ((self.side as f64 * self.host_scale).round() as usize).max(self.side)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("phantom spec", reason));
        if self.side < 4 {
            return bad(format!("side {} is below 4", self.side));
        }
        let (lo, hi) = self.ellipsoids;
        if lo == 0 || lo > hi {
            return bad(format!("ellipsoid count range {lo}..={hi}"));
        }
        let (r_min, r_max) = self.radius;
        if !(r_min >= 1.0 && r_min <= r_max) {
            return bad(format!("radius range {r_min}..{r_max}"));
        }
        if r_max + self.jitter() > self.side as f64 / 2.0 - 0.5 {
            return bad(format!(
                "radius {r_max} plus centre jitter {} does not fit a {}-voxel cube",
                self.jitter(),
                self.side
            ));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.lesion_mean) || !unit(self.background_mean) {
            return bad("intensities must lie in [0, 1]".into());
        }
        if !(self.noise_std >= 0.0 && self.blur_sigma >= 0.0 && self.ramp >= 0.0 && self.host_scale >= 1.0) {
            return bad("noise, blur and ramp must be non-negative and host_scale at least 1".into());
        }
        Ok(())
    }
}

/// One phantom: the lesion cube, its mask, and the host it sits in.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub mask: MaskVolume,
    pub lesion: Volume,
    pub host: Volume,
    pub origin: Dims,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn random_mask(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> MaskVolume {
    let s = spec.side;
    let mid = (s as f64 - 1.0) / 2.0;
    let count = rng.gen_range(spec.ellipsoids.0..=spec.ellipsoids.1);
    let (r_min, r_max) = spec.radius;
    let j = spec.jitter();
    let shapes: Vec<Ellipsoid> = (0..count)
        .map(|_| Ellipsoid {
            centre: [0; 3].map(|_: u8| mid + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 }),
            radii: [0; 3].map(|_: u8| rng.gen_range(r_min..=r_max)),
        })
        .collect();
    let mut mask = MaskVolume::empty([s; 3]);
    for d in 0..s {
        for h in 0..s {
            for w in 0..s {
                let p = [d as f64, h as f64, w as f64];
                if shapes.iter().any(|e| e.contains(p)) {
                    mask.set(d, h, w, true);
                }
            }
        }
    }
    if mask.is_empty() {
        // Radii of at least one voxel make this unreachable; keep the
        // guarantee explicit anyway.
        let c = s / 2;
        mask.set(c, c, c, true);
    }
    mask
}

fn noise(spec: &PhantomSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if spec.noise_std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, spec.noise_std).expect("validated std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn clip01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// A lesion-free volume of the given dims: background level plus noise.
pub fn background_volume(spec: &PhantomSpec, dims: Dims, seed: u64) -> Volume {
    let mut rng = sample_rng(seed, usize::MAX);
    let data = noise(spec, voxel_count(dims), &mut rng)
        .into_iter()
        .map(|e| clip01(spec.background_mean + e))
        .collect();
    Volume::new(dims, data).expect("length matches dims")
}

fn lesion_image(spec: &PhantomSpec, mask: &MaskVolume, rng: &mut ChaCha8Rng) -> Volume {
    let s = spec.side;
    let dims = [s; 3];
    let alpha = gaussian_blur(
        &mask.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        dims,
        spec.blur_sigma,
    );
    let dir: [f64; 3] = {
        let v = [0; 3].map(|_: u8| rng.gen_range(-1.0..=1.0f64));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        v.map(|x| x / norm)
    };
    let mid = (s as f64 - 1.0) / 2.0;
    let noise = noise(spec, voxel_count(dims), rng);
    let mut data = vec![0.0f32; voxel_count(dims)];
    for d in 0..s {
        for h in 0..s {
            for w in 0..s {
                let i = flat_index(dims, d, h, w);
                let along = [d, h, w]
                    .iter()
                    .zip(dir)
                    .map(|(&p, u)| (p as f64 - mid) * u)
                    .sum::<f64>()
                    / spec.radius.1;
                let inside = spec.lesion_mean + spec.ramp * along.clamp(-1.0, 1.0);
                let clean = spec.background_mean + alpha[i] * (inside - spec.background_mean);
                data[i] = clip01(clean + noise[i]);
            }
        }
    }
    Volume::new(dims, data).expect("length matches dims")
}

/// Generates `spec.count` phantoms. Sample `i` depends only on `(seed, i)`.
pub fn make_phantoms(spec: &PhantomSpec, seed: u64) -> Result<Vec<SamplePair>> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| make_phantom(spec, seed, i)).collect())
}

/// The `index`-th phantom of the stream for `seed`.
pub fn make_phantom(spec: &PhantomSpec, seed: u64, index: usize) -> SamplePair {
    let mut rng = sample_rng(seed, index);
    let mask = random_mask(spec, &mut rng);
    let lesion = lesion_image(spec, &mask, &mut rng);
    let host_side = spec.host_side();
    let span = host_side - spec.side;
    let origin = [0; 3].map(|_: u8| rng.gen_range(0..=span));
    let host_noise = noise(spec, host_side.pow(3), &mut rng);
    let mut host: Vec<f32> = host_noise
        .into_iter()
        .map(|e| clip01(spec.background_mean + e))
        .collect();
    let host_dims = [host_side; 3];
    for d in 0..spec.side {
        for h in 0..spec.side {
            let dst = flat_index(host_dims, origin[0] + d, origin[1] + h, origin[2]);
            let src = flat_index([spec.side; 3], d, h, 0);
            host[dst..dst + spec.side].copy_from_slice(&lesion.data()[src..src + spec.side]);
        }
    }
    SamplePair {
        mask,
        lesion,
        host: Volume::new(host_dims, host).expect("length matches dims"),
        origin,
    }
}

/// Feathered paste: `α = blur(mask, σ = 1)` and, inside the cube at
/// `origin`, `out = α·lesion + (1 − α)·host`. Voxels outside the cube are
/// copied from the host.
pub fn composite(host: &Volume, lesion: &Volume, mask: &MaskVolume, origin: Dims) -> Result<Volume> {
    if lesion.dims() != mask.dims() {
        return Err(Error::invalid(
            "composite",
            format!("lesion {:?} and mask {:?} differ", lesion.dims(), mask.dims()),
        ));
    }
    let dims = lesion.dims();
    check_fits(origin, dims, host.dims())?;
    let alpha = gaussian_blur(
        &mask.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        dims,
        1.0,
    );
    let mut out = host.clone();
    let host_dims = host.dims();
    let data = out.data_mut();
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let i = flat_index(dims, d, h, w);
                let mut a = alpha[i];
                if a < 1e-9 {
                    continue;
                }
                if a > 1.0 - 1e-9 {
                    a = 1.0;
                }
                let j = flat_index(host_dims, origin[0] + d, origin[1] + h, origin[2] + w);
                let blended = a * lesion.data()[i] as f64 + (1.0 - a) * data[j] as f64;
                data[j] = blended as f32;
            }
        }
    }
    Ok(out)
}
