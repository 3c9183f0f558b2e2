//! Inference: new masks from the size-conditioned network, lesions guided by
//! any mask, and posterior-mean reconstructions for evaluation.

use std::collections::VecDeque;

use pavae_autograd::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{condition_batch, encode_condition, ConditionVector};
use crate::error::{Error, Result};
use crate::models::{standard_normal, LesionSynthNet, MaskSynthNet, VaeGan};
use crate::volume::{flat_index, stack_masks, stack_volumes, unstack_volumes, MaskVolume, Volume};

pub const MASK_THRESHOLD: f32 = 0.5;
pub const MAX_MASK_RETRIES: usize = 10;
/// Samples decoded together; bounds peak memory.
const CHUNK: usize = 8;

fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Keeps the largest 6-connected foreground component. Ties go to the
/// component containing the lowest flat index.
pub fn largest_component(mask: &MaskVolume) -> MaskVolume {
    let dims = mask.dims();
    let n = dims.iter().product::<usize>();
    let mut label = vec![0u32; n];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if mask.data()[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (d, h, w) = (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]);
            let p = [d, h, w];
            for axis in 0..3 {
                for up in [false, true] {
                    let mut q = p;
                    if up {
                        q[axis] += 1;
                        if q[axis] == dims[axis] {
                            continue;
                        }
                    } else if q[axis] == 0 {
                        continue;
                    } else {
                        q[axis] -= 1;
                    }
                    let j = flat_index(dims, q[0], q[1], q[2]);
                    if mask.data()[j] == 1 && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    let data = label.iter().map(|&l| u8::from(l != 0 && l == best.1)).collect();
    MaskVolume::new(dims, data).expect("binary by construction")
}

/// Threshold, then keep the largest component.
pub fn binarize_at(volume: &Volume, threshold: f32) -> MaskVolume {
    largest_component(&MaskVolume::from_threshold(volume, threshold))
}

pub fn binarize(volume: &Volume) -> MaskVolume {
    binarize_at(volume, MASK_THRESHOLD)
}

/// A sampled mask and the condition it was decoded with.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledMask {
    pub mask: MaskVolume,
    pub condition: f64,
}

/// `n` masks from `z ~ N(0, I)` and a condition drawn uniformly from the
/// training range. Draws that come out empty are redrawn up to ten times.
pub fn sample_masks_with_conditions<T: Real>(net: &MaskSynthNet<T>, n: usize, seed: u64) -> Result<Vec<SampledMask>> {
    sample_masks_at(net, n, seed, MASK_THRESHOLD)
}

fn sample_masks_at<T: Real>(net: &MaskSynthNet<T>, n: usize, seed: u64, threshold: f32) -> Result<Vec<SampledMask>> {
    let latent = net.cfg.latent_dim;
    let (lo, hi) = net.cond_range;
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| item_rng(seed, i)).collect();
    let mut out: Vec<Option<SampledMask>> = vec![None; n];
    for _ in 0..=MAX_MASK_RETRIES {
        let pending: Vec<usize> = (0..n).filter(|&i| out[i].is_none()).collect();
        if pending.is_empty() {
            break;
        }
        for chunk in pending.chunks(CHUNK) {
            let mut z = Vec::with_capacity(chunk.len() * latent);
            let mut conds = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let zi: Tensor<T> = standard_normal(&[latent], &mut rngs[i]);
                z.extend_from_slice(zi.data());
                let c = if hi > lo { rngs[i].gen_range(lo..=hi) } else { lo };
                conds.push(ConditionVector::new(vec![c])?);
            }
            let z = Tensor::from_vec(vec![chunk.len(), latent], z)?;
            let decoded = unstack_volumes(&net.decode(&z, &condition_batch(&conds)?)?)?;
            for ((&i, v), c) in chunk.iter().zip(&decoded).zip(&conds) {
                let mask = binarize_at(v, threshold);
                if !mask.is_empty() {
                    out[i] = Some(SampledMask {
                        mask,
                        condition: c.values[0],
                    });
                }
            }
        }
    }
    out.into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::DegenerateModel("mask network".into()))
}

pub fn sample_masks<T: Real>(net: &MaskSynthNet<T>, n: usize, seed: u64) -> Result<Vec<MaskVolume>> {
    Ok(sample_masks_with_conditions(net, n, seed)?
        .into_iter()
        .map(|s| s.mask)
        .collect())
}

/// As `sample_masks` with a custom binarization threshold.
pub fn sample_masks_thresholded<T: Real>(net: &MaskSynthNet<T>, n: usize, seed: u64, threshold: f32) -> Result<Vec<MaskVolume>> {
    Ok(sample_masks_at(net, n, seed, threshold)?.into_iter().map(|s| s.mask).collect())
}

/// One lesion per mask, each from its own `z ~ N(0, I)`.
pub fn sample_lesions<T: Real>(net: &LesionSynthNet<T>, masks: &[MaskVolume], seed: u64) -> Result<Vec<Volume>> {
    let latent = net.cfg.latent_dim;
    let mut out = Vec::with_capacity(masks.len());
    for (c, chunk) in masks.chunks(CHUNK).enumerate() {
        let mut z = Vec::with_capacity(chunk.len() * latent);
        for i in 0..chunk.len() {
            let zi: Tensor<T> = standard_normal(&[latent], &mut item_rng(seed, c * CHUNK + i));
            z.extend_from_slice(zi.data());
        }
        let z = Tensor::from_vec(vec![chunk.len(), latent], z)?;
        let guide = stack_masks(&chunk.iter().collect::<Vec<_>>())?;
        out.extend(unstack_volumes(&net.decode(&z, &guide)?)?);
    }
    Ok(out)
}

/// Decodes the posterior mean of each lesion, guided by `masks`.
pub fn reconstruct_lesions<T: Real>(net: &LesionSynthNet<T>, lesions: &[&Volume], masks: &[&MaskVolume]) -> Result<Vec<Volume>> {
    if lesions.len() != masks.len() {
        return Err(Error::invalid(
            "reconstruction",
            format!("{} lesions but {} masks", lesions.len(), masks.len()),
        ));
    }
    let mut out = Vec::with_capacity(lesions.len());
    for (ls, ms) in lesions.chunks(CHUNK).zip(masks.chunks(CHUNK)) {
        let (mu, _) = net.encode(&stack_volumes(ls)?)?;
        out.extend(unstack_volumes(&net.decode(&mu, &stack_masks(ms)?)?)?);
    }
    Ok(out)
}

/// Decodes the posterior mean of each mask under its own size condition,
/// then binarizes.
pub fn reconstruct_masks<T: Real>(net: &MaskSynthNet<T>, masks: &[&MaskVolume]) -> Result<Vec<MaskVolume>> {
    let mut out = Vec::with_capacity(masks.len());
    for ms in masks.chunks(CHUNK) {
        let conds = ms.iter().map(|m| encode_condition(m)).collect::<Result<Vec<_>>>()?;
        let (mu, _) = net.encode(&stack_masks(ms)?)?;
        let decoded = unstack_volumes(&net.decode(&mu, &condition_batch(&conds)?)?)?;
        out.extend(decoded.iter().map(binarize));
    }
    Ok(out)
}
