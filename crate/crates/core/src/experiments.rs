//! Desk-scale versions of the two evaluation studies: synthesis quality of
//! the full model against its ablations, and segmentation with and without
//! synthetic augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::models::{LesionSynthNet, MaskSynthNet, NetConfig};
use crate::losses::LossWeights;
use crate::phantom::{background_volume, composite, make_phantoms, PhantomSpec, SamplePair};
use crate::sampling::{reconstruct_lesions, reconstruct_masks, sample_lesions, sample_masks};
use crate::segment::{train_segmenter, Segmenter, SegmenterConfig};
use crate::train::{init_rng, train_lesion_stage, train_mask_stage, TrainConfig};
use crate::volume::{check_fits, Dims, MaskVolume, Volume};

/// Trained models for one seed of the synthesis study.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub mask_net: MaskSynthNet<f32>,
    pub lesion_net: LesionSynthNet<f32>,
    /// Same lesion architecture trained without adversarial loss and with
    /// the mask blocks frozen: a plain VAE.
    pub plain_vae: LesionSynthNet<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisStudyConfig {
    pub net: NetConfig,
    pub mask_train: TrainConfig,
    /// Used for the lesion stage and, without adversarial loss and mask
    /// guidance, for the plain VAE.
    pub lesion_train: TrainConfig,
    pub train_count: usize,
    pub test_count: usize,
}

impl SynthesisStudyConfig {
    /// The single-core desk scale: 64 training and 16 test phantoms at 32³
    /// with small networks. A light KL weight keeps reconstructions sharp
    /// enough to separate the configurations, and the mask stage gets twice
    /// the lesion stage's steps because it learns shape alone.
    pub fn desk() -> Self {
        let train = desk_train(300);
        Self {
            net: NetConfig {
                side: 32,
                levels: 3,
                base_channels: 4,
                latent_dim: 16,
                cond_hidden: 16,
                meb_hidden: 4,
            },
            mask_train: TrainConfig {
                max_steps: Some(600),
                ..train
            },
            lesion_train: train,
            train_count: 64,
            test_count: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.mask_train.validate()?;
        self.lesion_train.validate()?;
        if self.train_count == 0 || self.test_count < 2 {
            return Err(Error::invalid("study split", "need training samples and at least two test samples"));
        }
        Ok(())
    }

    /// Phantoms for `seed`: the first `train_count` train, the rest test.
    pub fn phantoms(&self, seed: u64) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
        let spec = PhantomSpec::for_side(self.net.side, self.train_count + self.test_count);
        let mut all = make_phantoms(&spec, seed)?;
        let test = all.split_off(self.train_count);
        Ok((all, test))
    }

    pub fn plain_vae_train(&self) -> TrainConfig {
        TrainConfig {
            weights: LossWeights {
                w_adv: 0.0,
                ..self.lesion_train.weights
            },
            freeze_conditioning: true,
            ..self.lesion_train
        }
    }
}

/// Training settings shared by the desk-scale experiments.
pub fn desk_train(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch: 4,
        max_steps: Some(steps),
        weights: LossWeights {
            w_rec: 1.0,
            w_kl: 0.01,
            w_adv: 0.01,
        },
        ..TrainConfig::default()
    }
}

/// Trains the mask network, the mask-guided lesion network and the plain
/// VAE baseline on the same phantoms. `progress` receives one line per stage.
pub fn train_study_models(
    cfg: &SynthesisStudyConfig,
    train: &[SamplePair],
    seed: u64,
    mut progress: impl FnMut(&str),
) -> Result<TrainedModels> {
    cfg.validate()?;
    let masks: Vec<&MaskVolume> = train.iter().map(|p| &p.mask).collect();
    let pairs: Vec<&SamplePair> = train.iter().collect();

    let mut mask_net = MaskSynthNet::new(&cfg.net, &mut init_rng(seed))?;
    let log = train_mask_stage(&mut mask_net, &masks, &TrainConfig { seed, ..cfg.mask_train }, |_, _| {})?;
    progress(&format!("mask stage: {} steps, final l_rec {:.4}", log.len(), log.last().map_or(0.0, |r| r.l_rec)));

    let mut lesion_net = LesionSynthNet::new(&cfg.net, &mut init_rng(seed))?;
    let log = train_lesion_stage(&mut lesion_net, &pairs, &TrainConfig { seed, ..cfg.lesion_train }, |_, _| {})?;
    progress(&format!("lesion stage: {} steps, final l_rec {:.4}", log.len(), log.last().map_or(0.0, |r| r.l_rec)));

    let mut plain_vae = LesionSynthNet::new(&cfg.net, &mut init_rng(seed))?;
    let plain = TrainConfig { seed, ..cfg.plain_vae_train() };
    let log = train_lesion_stage(&mut plain_vae, &pairs, &plain, |_, _| {})?;
    progress(&format!("plain VAE: {} steps, final l_rec {:.4}", log.len(), log.last().map_or(0.0, |r| r.l_rec)));

    Ok(TrainedModels {
        mask_net,
        lesion_net,
        plain_vae,
    })
}

/// Mean synthesis metrics of each configuration on the test phantoms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisComparison {
    pub real_mask: MetricsReport,
    pub syn_mask: MetricsReport,
    pub plain_vae: MetricsReport,
}

impl SynthesisComparison {
    /// Full model with real masks beats it with synthetic masks, which beats
    /// the plain VAE, on both PSNR and SSIM.
    pub fn ordered(&self) -> bool {
        let key = |r: &MetricsReport| (r.psnr_db.unwrap_or(f64::NAN), r.ssim.unwrap_or(f64::NAN));
        let (a, b, c) = (key(&self.real_mask), key(&self.syn_mask), key(&self.plain_vae));
        a.0 > b.0 && b.0 > c.0 && a.1 > b.1 && b.1 > c.1
    }
}

fn mean_synthesis(reference: &[&Volume], test: &[Volume]) -> Result<MetricsReport> {
    let reports = reference
        .iter()
        .zip(test)
        .map(|(r, t)| MetricsReport::synthesis(r, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::mean(&reports))
}

/// Every configuration reconstructs each test lesion from its posterior
/// mean. The full model is guided by the real mask or by the mask network's
/// reconstruction of it; the plain VAE has no guidance.
pub fn compare_synthesis(models: &TrainedModels, test: &[SamplePair]) -> Result<SynthesisComparison> {
    let lesions: Vec<&Volume> = test.iter().map(|p| &p.lesion).collect();
    let masks: Vec<&MaskVolume> = test.iter().map(|p| &p.mask).collect();
    let syn_masks = reconstruct_masks(&models.mask_net, &masks)?;
    let syn_refs: Vec<&MaskVolume> = syn_masks.iter().collect();
    Ok(SynthesisComparison {
        real_mask: mean_synthesis(&lesions, &reconstruct_lesions(&models.lesion_net, &lesions, &masks)?)?,
        syn_mask: mean_synthesis(&lesions, &reconstruct_lesions(&models.lesion_net, &lesions, &syn_refs)?)?,
        plain_vae: mean_synthesis(&lesions, &reconstruct_lesions(&models.plain_vae, &lesions, &masks)?)?,
    })
}

/// How strongly sampled lesions follow their guidance masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceProbe {
    /// Mean over samples of (mean inside mask − mean outside mask).
    pub contrast: f64,
    /// Largest voxel change when each sample's mask is replaced by the next
    /// sample's, latent codes held fixed.
    pub swap_max_diff: f64,
}

fn inside_outside(v: &Volume, m: &MaskVolume) -> f64 {
    let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for (&x, &b) in v.data().iter().zip(m.data()) {
        if b == 1 {
            s_in += x as f64;
            n_in += 1;
        } else {
            s_out += x as f64;
            n_out += 1;
        }
    }
    s_in / n_in.max(1) as f64 - s_out / n_out.max(1) as f64
}

pub fn probe_guidance(net: &LesionSynthNet<f32>, masks: &[MaskVolume], seed: u64) -> Result<GuidanceProbe> {
    if masks.len() < 2 {
        return Err(Error::invalid("guidance probe", "needs at least two masks"));
    }
    let base = sample_lesions(net, masks, seed)?;
    let contrast = base.iter().zip(masks).map(|(v, m)| inside_outside(v, m)).sum::<f64>() / masks.len() as f64;
    let mut rotated = masks.to_vec();
    rotated.rotate_left(1);
    let swapped = sample_lesions(net, &rotated, seed)?;
    let swap_max_diff = base
        .iter()
        .zip(&swapped)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64))
        .fold(0.0, f64::max);
    Ok(GuidanceProbe {
        contrast,
        swap_max_diff,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    /// Generator networks, trained on the raw lesion cubes.
    pub net: NetConfig,
    pub train: TrainConfig,
    pub raw_count: usize,
    pub test_count: usize,
    pub synth_count: usize,
    pub segmenter: SegmenterConfig,
}

impl DownstreamConfig {
    /// Desk scale: 16³ generators trained on the raw cubes, hosts of 24³.
    pub fn desk() -> Self {
        Self {
            net: NetConfig {
                side: 16,
                levels: 2,
                base_channels: 4,
                latent_dim: 16,
                cond_hidden: 16,
                meb_hidden: 4,
            },
            // Synthetic images come from the prior, so the KL term keeps full
            // weight here; lighter weights leave sampled masks too small.
            train: TrainConfig {
                weights: LossWeights::default(),
                ..desk_train(600)
            },
            raw_count: 16,
            test_count: 16,
            synth_count: 100,
            segmenter: SegmenterConfig::default(),
        }
    }
}

/// Both arms of the augmentation experiment, evaluated on the same
/// held-out phantoms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    /// Raw training data only.
    pub noda: MetricsReport,
    /// Raw data plus synthetic lesions composited into lesion-free hosts.
    pub augmented: MetricsReport,
    /// `augmented.dice − noda.dice`.
    pub dice_gain: f64,
}

/// A label volume of `host` dims holding `mask` at `origin`.
pub fn place_mask(mask: &MaskVolume, origin: Dims, host: Dims) -> Result<MaskVolume> {
    check_fits(origin, mask.dims(), host)?;
    let mut out = MaskVolume::empty(host);
    let [d, h, w] = mask.dims();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.get(z, y, x) {
                    out.set(origin[0] + z, origin[1] + y, origin[2] + x, true);
                }
            }
        }
    }
    Ok(out)
}

/// Voxels of synthetic background kept around each lesion when pasting.
const PASTE_MARGIN: usize = 2;

/// Box dilation by `r` voxels, clipped to the volume.
pub fn dilate(mask: &MaskVolume, r: usize) -> MaskVolume {
    let dims = mask.dims();
    let mut out = mask.clone();
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                if !mask.get(d, h, w) {
                    continue;
                }
                for z in d.saturating_sub(r)..(d + r + 1).min(dims[0]) {
                    for y in h.saturating_sub(r)..(h + r + 1).min(dims[1]) {
                        for x in w.saturating_sub(r)..(w + r + 1).min(dims[2]) {
                            out.set(z, y, x, true);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Synthetic training images: sampled masks and lesions pasted into fresh
/// lesion-free hosts at random positions. The paste region is the mask
/// grown by a small margin, so the feathered edge falls on synthetic
/// background and the lesion itself is copied at full weight; the label is
/// the mask itself.
pub fn synthetic_hosts(
    models: (&MaskSynthNet<f32>, &LesionSynthNet<f32>),
    spec: &PhantomSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<(Volume, MaskVolume)>> {
    let masks = sample_masks(models.0, count, seed)?;
    let lesions = sample_lesions(models.1, &masks, seed.wrapping_add(1))?;
    let host_dims = [spec.host_side(); 3];
    let span = spec.host_side() - spec.side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    masks
        .iter()
        .zip(&lesions)
        .enumerate()
        .map(|(i, (m, l))| {
            let origin = [0; 3].map(|_: u8| rng.gen_range(0..=span));
            let host = background_volume(spec, host_dims, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            Ok((
                composite(&host, l, &dilate(m, PASTE_MARGIN), origin)?,
                place_mask(m, origin, host_dims)?,
            ))
        })
        .collect()
}

fn evaluate_segmenter(net: &Segmenter<f32>, test: &[(Volume, MaskVolume)]) -> Result<MetricsReport> {
    let predicted = net.predict(&test.iter().map(|(v, _)| v).collect::<Vec<_>>())?;
    let reports = test
        .iter()
        .zip(&predicted)
        .map(|((_, truth), p)| MetricsReport::segmentation_lenient(truth, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::mean(&reports))
}

/// Raw phantoms as (host image, host-sized label) pairs.
pub fn host_pairs(pairs: &[SamplePair]) -> Result<Vec<(Volume, MaskVolume)>> {
    pairs
        .iter()
        .map(|p| Ok((p.host.clone(), place_mask(&p.mask, p.origin, p.host.dims())?)))
        .collect()
}

/// Trains both generator stages on the raw cubes, draws `synth_count`
/// synthetic images, then trains and evaluates the segmenter without and
/// with them.
pub fn run_downstream_experiment(
    cfg: &DownstreamConfig,
    seed: u64,
    mut progress: impl FnMut(&str),
) -> Result<DownstreamReport> {
    cfg.net.validate()?;
    cfg.train.validate()?;
    let spec = PhantomSpec::for_side(cfg.net.side, cfg.raw_count + cfg.test_count);
    let mut raw = make_phantoms(&spec, seed)?;
    let test = host_pairs(&raw.split_off(cfg.raw_count))?;
    let tc = TrainConfig { seed, ..cfg.train };

    let mut mask_net = MaskSynthNet::new(&cfg.net, &mut init_rng(seed))?;
    train_mask_stage(&mut mask_net, &raw.iter().map(|p| &p.mask).collect::<Vec<_>>(), &tc, |_, _| {})?;
    let mut lesion_net = LesionSynthNet::new(&cfg.net, &mut init_rng(seed))?;
    train_lesion_stage(&mut lesion_net, &raw.iter().collect::<Vec<_>>(), &tc, |_, _| {})?;
    progress("generator stages trained");

    let raw = host_pairs(&raw)?;
    let synth = synthetic_hosts((&mask_net, &lesion_net), &spec, cfg.synth_count, seed)?;
    let seg = SegmenterConfig { seed, ..cfg.segmenter };

    let (images, labels): (Vec<&Volume>, Vec<&MaskVolume>) = raw.iter().map(|(v, m)| (v, m)).unzip();
    let (net, _) = train_segmenter(&images, &labels, &seg)?;
    let noda = evaluate_segmenter(&net, &test)?;
    progress(&format!("NoDA segmenter: dice {:.4}", noda.dice.unwrap_or(f64::NAN)));

    let (images, labels): (Vec<&Volume>, Vec<&MaskVolume>) = raw.iter().chain(&synth).map(|(v, m)| (v, m)).unzip();
    let (net, _) = train_segmenter(&images, &labels, &seg)?;
    let augmented = evaluate_segmenter(&net, &test)?;
    progress(&format!("augmented segmenter: dice {:.4}", augmented.dice.unwrap_or(f64::NAN)));

    Ok(DownstreamReport {
        noda,
        augmented,
        dice_gain: augmented.dice.unwrap_or(f64::NAN) - noda.dice.unwrap_or(f64::NAN),
    })
}
