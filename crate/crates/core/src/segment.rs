//! Small encoder-decoder segmenter for the downstream experiment: one
//! stride-2 level with an additive skip, trained on Dice plus binary
//! cross-entropy.

use pavae_autograd::{Real, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{collect_grads, instance_norm3d, leaky, AdamConfig, AdamState, Conv3d, Module, Parameter, NORM_EPS};
use crate::volume::{stack_masks, stack_volumes, MaskVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub channels: usize,
    /// Passes over the training set; each arm of an experiment gets the same
    /// number, so more data means more steps.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl SegmenterConfig {
    /// Optimizer steps for `samples` training images.
    pub fn steps(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch.max(1))
    }
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            epochs: 50,
            batch: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Segmenter<T: Real> {
    pub enc: Conv3d<T>,
    pub down: Conv3d<T>,
    pub mid: Conv3d<T>,
    pub up: Conv3d<T>,
    pub dec: Conv3d<T>,
    pub head: Conv3d<T>,
}

fn block<T: Real>(conv: &Conv3d<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    leaky(&instance_norm3d(&conv.forward(x)?, NORM_EPS)?)
}

impl<T: Real> Segmenter<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Result<Self> {
        let c = channels;
        Ok(Self {
            enc: Conv3d::new("seg.enc", 1, c, 1, rng)?.without_bias(),
            down: Conv3d::new("seg.down", c, 2 * c, 2, rng)?.without_bias(),
            mid: Conv3d::new("seg.mid", 2 * c, 2 * c, 1, rng)?.without_bias(),
            up: Conv3d::new("seg.up", 2 * c, c, 1, rng)?.without_bias(),
            dec: Conv3d::new("seg.dec", c, c, 1, rng)?.without_bias(),
            head: Conv3d::new("seg.head", c, 1, 1, rng)?,
        })
    }

    /// Foreground logits for `[N, 1, D, H, W]` input with even spatial sides.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match *x.shape() {
            [_, 1, d, h, w] if d % 2 == 0 && h % 2 == 0 && w % 2 == 0 && d >= 4 && h >= 4 && w >= 4 => {}
            _ => {
                return Err(Error::invalid(
                    "segmenter input",
                    format!("expected [N, 1, D, H, W] with even sides of at least 4, got {:?}", x.shape()),
                ))
            }
        }
        let e = block(&self.enc, x)?;
        let m = block(&self.mid, &block(&self.down, &e)?)?;
        let u = block(&self.up, &m.upsample3d(2)?)?;
        let d = block(&self.dec, &u.add(&e)?)?;
        self.head.forward(&d)
    }

    pub fn predict(&self, volumes: &[&Volume]) -> Result<Vec<MaskVolume>> {
        let mut out = Vec::with_capacity(volumes.len());
        for chunk in volumes.chunks(8) {
            let logits = self.forward(&stack_volumes(chunk)?)?;
            let per = logits.numel() / chunk.len();
            for (v, l) in chunk.iter().zip(logits.data().chunks_exact(per)) {
                let data = l.iter().map(|&x| u8::from(x.as_f64() > 0.0)).collect();
                out.push(MaskVolume::new(v.dims(), data)?);
            }
        }
        Ok(out)
    }
}

impl<T: Real> Module<T> for Segmenter<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        [&self.enc, &self.down, &self.mid, &self.up, &self.dec, &self.head]
            .into_iter()
            .flat_map(|c| c.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        [&mut self.enc, &mut self.down, &mut self.mid, &mut self.up, &mut self.dec, &mut self.head]
            .into_iter()
            .flat_map(|c| c.params_mut())
            .collect()
    }
}

/// Soft Dice loss plus mean binary cross-entropy, from logits.
pub fn dice_bce_loss<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    // BCE with logits: softplus(l) − y·l
    let bce = logits.softplus()?.sub(&target.mul(logits)?)?.mean()?;
    let p = logits.sigmoid()?;
    let one = T::one();
    let inter = p.mul(target)?.sum()?.mul_scalar(T::from_f64_lossy(2.0))?.add_scalar(one)?;
    let denom = p.sum()?.add(&target.sum()?)?.add_scalar(one)?;
    let dice = inter.div(&denom)?.neg()?.add_scalar(one)?;
    Ok(dice.add(&bce)?)
}

/// Trains a fresh segmenter on `(image, label)` pairs; returns it with its
/// per-step losses.
pub fn train_segmenter(
    images: &[&Volume],
    labels: &[&MaskVolume],
    cfg: &SegmenterConfig,
) -> Result<(Segmenter<f32>, Vec<f64>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid("segmenter data", format!("{} images, {} labels", images.len(), labels.len())));
    }
    if cfg.epochs == 0 || cfg.batch == 0 || cfg.channels == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("segmenter config", "epochs, batch, channels and lr must be positive"));
    }
    let steps = cfg.steps(images.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Segmenter::new(cfg.channels, &mut rng)?;
    let mut opt = AdamState::new(AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut pos = order.len();
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(images.len()) {
            if pos == order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            idx.push(order[pos]);
            pos += 1;
        }
        let x = stack_volumes::<f32>(&idx.iter().map(|&i| images[i]).collect::<Vec<_>>())?;
        let y = stack_masks::<f32>(&idx.iter().map(|&i| labels[i]).collect::<Vec<_>>())?;
        let tape = Tape::new();
        net.attach(&tape);
        let loss = dice_bce_loss(&net.forward(&x)?, &y)?;
        let value = loss.item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("segmenter loss at step {step}")));
        }
        let grads = tape.backward(&loss, false)?;
        collect_grads(net.params_mut(), &grads)?;
        net.detach();
        opt.step(net.params_mut())?;
        log.push(value);
    }
    Ok((net, log))
}
