//! The two synthesis networks: a size-conditioned mask VAE and a
//! mask-guided lesion VAE, each with its own Wasserstein critic.

use pavae_autograd::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{Ceb, Meb};
use crate::error::{Error, Result};
use crate::losses::Critic;
use crate::nn::{instance_norm3d, leaky, Conv3d, Linear, Module, Parameter, NORM_EPS};

/// Architecture of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Cube side of inputs and outputs; a power of two.
    pub side: usize,
    /// Number of stride-2 stages in the encoder and critic, and of
    /// upsampling stages in the decoder.
    pub levels: usize,
    /// Channels after the first encoder stage; doubled per stage.
    pub base_channels: usize,
    pub latent_dim: usize,
    /// Width of the condition block's hidden layer.
    pub cond_hidden: usize,
    /// Width of the mask block's shared convolution.
    pub meb_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            side: 32,
            levels: 3,
            base_channels: 16,
            latent_dim: 64,
            cond_hidden: 32,
            meb_hidden: 32,
        }
    }
}

/// Dimension of the condition vector (normalized log lesion size).
pub const COND_DIM: usize = 1;

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("network config", reason));
        if !self.side.is_power_of_two() {
            return bad(format!("side {} is not a power of two", self.side));
        }
        if self.levels == 0 || self.levels >= usize::BITS as usize || (self.side >> self.levels) < 2 {
            return bad(format!("side {} / 2^{} must be at least 2", self.side, self.levels));
        }
        if self.base_channels == 0 || self.latent_dim == 0 || self.cond_hidden == 0 || self.meb_hidden == 0 {
            return bad("channel widths and latent_dim must be at least 1".into());
        }
        Ok(())
    }

    pub fn coarse_side(&self) -> usize {
        self.side >> self.levels
    }

    /// Output channels of encoder / critic stage `i`.
    pub fn encoder_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Output channels of decoder stage `j`, halving towards full resolution
    /// and never below the base width.
    pub fn decoder_channels(&self, j: usize) -> usize {
        let exp = self.levels as isize - 2 - j as isize;
        if exp <= 0 {
            self.base_channels
        } else {
            self.base_channels << exp
        }
    }

    /// Side of the feature grid after decoder stage `j`.
    pub fn decoder_side(&self, j: usize) -> usize {
        self.coarse_side() << (j + 1)
    }

    fn deepest_channels(&self) -> usize {
        self.encoder_channels(self.levels - 1)
    }
}

fn check_volume_batch<T: Real>(x: &Tensor<T>, side: usize) -> Result<usize> {
    match *x.shape() {
        [n, 1, d, h, w] if d == h && h == w => {
            if d != side {
                return Err(Error::Resolution { expected: side, actual: d });
            }
            Ok(n)
        }
        _ => Err(Error::invalid(
            "volume batch",
            format!("expected [N, 1, {side}, {side}, {side}], got {:?}", x.shape()),
        )),
    }
}

/// Strided convolution stack with two linear heads for `(mu, logvar)`.
#[derive(Debug, Clone)]
pub struct Encoder<T: Real> {
    side: usize,
    pub blocks: Vec<Conv3d<T>>,
    pub mu: Linear<T>,
    pub logvar: Linear<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(id: &str, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.levels);
        let mut c_in = 1;
        for i in 0..cfg.levels {
            let c_out = cfg.encoder_channels(i);
            blocks.push(Conv3d::new(&format!("{id}.block{i}.conv"), c_in, c_out, 2, rng)?.without_bias());
            c_in = c_out;
        }
        let flat = c_in * cfg.coarse_side().pow(3);
        Ok(Self {
            side: cfg.side,
            blocks,
            mu: Linear::new(&format!("{id}.mu"), flat, cfg.latent_dim, rng)?,
            logvar: Linear::new(&format!("{id}.logvar"), flat, cfg.latent_dim, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        check_volume_batch(x, self.side)?;
        let mut h = x.clone();
        for conv in &self.blocks {
            h = leaky(&instance_norm3d(&conv.forward(&h)?, NORM_EPS)?)?;
        }
        let flat = h.flatten_batch()?;
        Ok((self.mu.forward(&flat)?, self.logvar.forward(&flat)?))
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut out: Vec<_> = self.blocks.iter().flat_map(|b| b.params()).collect();
        out.extend(self.mu.params());
        out.extend(self.logvar.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out: Vec<_> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        out.extend(self.mu.params_mut());
        out.extend(self.logvar.params_mut());
        out
    }
}

/// Shared decoder topology. The guidance hook runs after every
/// normalization and before the activation.
#[derive(Debug, Clone)]
pub struct DecoderTrunk<T: Real> {
    cfg: NetConfig,
    pub project: Linear<T>,
    pub blocks: Vec<Conv3d<T>>,
    pub out: Conv3d<T>,
}

impl<T: Real> DecoderTrunk<T> {
    pub fn new<R: Rng + ?Sized>(id: &str, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let coarse = cfg.deepest_channels() * cfg.coarse_side().pow(3);
        let project = Linear::new(&format!("{id}.project"), cfg.latent_dim, coarse, rng)?;
        let mut blocks = Vec::with_capacity(cfg.levels);
        let mut c_in = cfg.deepest_channels();
        for j in 0..cfg.levels {
            let c_out = cfg.decoder_channels(j);
            blocks.push(Conv3d::new(&format!("{id}.block{j}.conv"), c_in, c_out, 1, rng)?.without_bias());
            c_in = c_out;
        }
        let out = Conv3d::new(&format!("{id}.out"), c_in, 1, 1, rng)?;
        Ok(Self {
            cfg: *cfg,
            project,
            blocks,
            out,
        })
    }

    pub fn forward(
        &self,
        z: &Tensor<T>,
        mut guide: impl FnMut(usize, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let n = match *z.shape() {
            [n, l] if l == self.cfg.latent_dim => n,
            _ => {
                return Err(Error::invalid(
                    "latent batch",
                    format!("expected [N, {}], got {:?}", self.cfg.latent_dim, z.shape()),
                ))
            }
        };
        let s = self.cfg.coarse_side();
        let mut h = self
            .project
            .forward(z)?
            .reshape(&[n, self.cfg.deepest_channels(), s, s, s])?;
        for (j, conv) in self.blocks.iter().enumerate() {
            h = conv.forward(&h.upsample3d(2)?)?;
            h = instance_norm3d(&h, NORM_EPS)?;
            h = guide(j, &h)?;
            h = leaky(&h)?;
        }
        Ok(self.out.forward(&h)?.sigmoid()?)
    }
}

impl<T: Real> Module<T> for DecoderTrunk<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.project.params();
        out.extend(self.blocks.iter().flat_map(|b| b.params()));
        out.extend(self.out.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.project.params_mut();
        out.extend(self.blocks.iter_mut().flat_map(|b| b.params_mut()));
        out.extend(self.out.params_mut());
        out
    }
}

/// Unconditional Wasserstein critic: strided convolutions without
/// normalization, then a linear read-out.
#[derive(Debug, Clone)]
pub struct CriticNet<T: Real> {
    side: usize,
    pub blocks: Vec<Conv3d<T>>,
    pub head: Linear<T>,
}

impl<T: Real> CriticNet<T> {
    pub fn new<R: Rng + ?Sized>(id: &str, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.levels);
        let mut c_in = 1;
        for i in 0..cfg.levels {
            let c_out = cfg.encoder_channels(i);
            blocks.push(Conv3d::new(&format!("{id}.block{i}.conv"), c_in, c_out, 2, rng)?);
            c_in = c_out;
        }
        let flat = c_in * cfg.coarse_side().pow(3);
        Ok(Self {
            side: cfg.side,
            blocks,
            // The Wasserstein loss cancels any constant offset.
            head: Linear::new(&format!("{id}.head"), flat, 1, rng)?.without_bias(),
        })
    }
}

impl<T: Real> Critic<T> for CriticNet<T> {
    fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = check_volume_batch(x, self.side)?;
        let mut h = x.clone();
        for conv in &self.blocks {
            h = leaky(&conv.forward(&h)?)?;
        }
        Ok(self.head.forward(&h.flatten_batch()?)?.reshape(&[n])?)
    }
}

impl<T: Real> Module<T> for CriticNet<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut out: Vec<_> = self.blocks.iter().flat_map(|b| b.params()).collect();
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out: Vec<_> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        out.extend(self.head.params_mut());
        out
    }
}

/// `z = mu + exp(½·logvar)·eps`.
pub fn reparameterize<T: Real>(mu: &Tensor<T>, logvar: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if mu.shape() != logvar.shape() || mu.shape() != eps.shape() {
        return Err(Error::invalid(
            "latent sample",
            format!("mu {:?}, logvar {:?}, eps {:?}", mu.shape(), logvar.shape(), eps.shape()),
        ));
    }
    let std = logvar.mul_scalar(T::from_f64_lossy(0.5))?.exp()?;
    Ok(mu.add(&std.mul(eps)?)?)
}

/// Standard normal tensor of the given shape.
pub fn standard_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(v)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("length matches shape")
}

/// One draw from the approximate posterior.
#[derive(Debug, Clone)]
pub struct LatentSample<T: Real> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    pub eps: Tensor<T>,
    pub z: Tensor<T>,
}

impl<T: Real> LatentSample<T> {
    pub fn draw<R: Rng + ?Sized>(mu: Tensor<T>, logvar: Tensor<T>, rng: &mut R) -> Result<Self> {
        let eps = standard_normal(mu.shape(), rng);
        let z = reparameterize(&mu, &logvar, &eps)?;
        Ok(Self { mu, logvar, eps, z })
    }
}

/// Common surface of the two stages, used by the training loop. The guide is
/// a condition batch `[N, k]` for masks and a mask batch `[N, 1, S, S, S]`
/// for lesions.
pub trait VaeGan<T: Real> {
    fn config(&self) -> &NetConfig;
    fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)>;
    fn decode(&self, z: &Tensor<T>, guide: &Tensor<T>) -> Result<Tensor<T>>;
    fn critic(&self) -> &CriticNet<T>;
    fn critic_mut(&mut self) -> &mut CriticNet<T>;
    /// Encoder and decoder parameters the generator optimizer updates.
    fn generator_params(&self) -> Vec<&Parameter<T>>;
    fn generator_params_mut(&mut self) -> Vec<&mut Parameter<T>>;
}

/// Mask stage: size-conditioned decoder.
#[derive(Debug, Clone)]
pub struct MaskSynthNet<T: Real> {
    pub cfg: NetConfig,
    pub encoder: Encoder<T>,
    pub decoder: DecoderTrunk<T>,
    pub cebs: Vec<Ceb<T>>,
    pub critic: CriticNet<T>,
    /// Range of training conditions, used when sampling.
    pub cond_range: (f64, f64),
    /// When set, condition blocks are skipped and left out of training.
    pub conditioning_frozen: bool,
}

impl<T: Real> MaskSynthNet<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new("mask_net.enc", cfg, rng)?;
        let decoder = DecoderTrunk::new("mask_net.dec", cfg, rng)?;
        let cebs = (0..cfg.levels)
            .map(|j| Ceb::new(&format!("mask_net.dec.block{j}.ceb"), COND_DIM, cfg.cond_hidden, cfg.decoder_channels(j), rng))
            .collect::<Result<_>>()?;
        let critic = CriticNet::new("mask_net.critic", cfg, rng)?;
        Ok(Self {
            cfg: *cfg,
            encoder,
            decoder,
            cebs,
            critic,
            cond_range: (0.0, 1.0),
            conditioning_frozen: false,
        })
    }
}

impl<T: Real> VaeGan<T> for MaskSynthNet<T> {
    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.encoder.forward(x)
    }

    fn decode(&self, z: &Tensor<T>, condition: &Tensor<T>) -> Result<Tensor<T>> {
        if self.conditioning_frozen {
            return self.decoder.forward(z, |_, h| Ok(h.clone()));
        }
        self.decoder.forward(z, |j, h| self.cebs[j].modulate(h, condition))
    }

    fn critic(&self) -> &CriticNet<T> {
        &self.critic
    }

    fn critic_mut(&mut self) -> &mut CriticNet<T> {
        &mut self.critic
    }

    fn generator_params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        if !self.conditioning_frozen {
            out.extend(self.cebs.iter().flat_map(|c| c.params()));
        }
        out
    }

    fn generator_params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        if !self.conditioning_frozen {
            out.extend(self.cebs.iter_mut().flat_map(|c| c.params_mut()));
        }
        out
    }
}

impl<T: Real> Module<T> for MaskSynthNet<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        out.extend(self.cebs.iter().flat_map(|c| c.params()));
        out.extend(self.critic.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out.extend(self.cebs.iter_mut().flat_map(|c| c.params_mut()));
        out.extend(self.critic.params_mut());
        out
    }
}

/// Lesion stage: mask-guided decoder.
#[derive(Debug, Clone)]
pub struct LesionSynthNet<T: Real> {
    pub cfg: NetConfig,
    pub encoder: Encoder<T>,
    pub decoder: DecoderTrunk<T>,
    pub mebs: Vec<Meb<T>>,
    pub critic: CriticNet<T>,
    /// When set, mask blocks are skipped and left out of training: the
    /// network is a plain VAE that ignores the guidance mask.
    pub conditioning_frozen: bool,
}

impl<T: Real> LesionSynthNet<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new("lesion_net.enc", cfg, rng)?;
        let decoder = DecoderTrunk::new("lesion_net.dec", cfg, rng)?;
        let mebs = (0..cfg.levels)
            .map(|j| Meb::new(&format!("lesion_net.dec.block{j}.meb"), cfg.meb_hidden, cfg.decoder_channels(j), rng))
            .collect::<Result<_>>()?;
        let critic = CriticNet::new("lesion_net.critic", cfg, rng)?;
        Ok(Self {
            cfg: *cfg,
            encoder,
            decoder,
            mebs,
            critic,
            conditioning_frozen: false,
        })
    }
}

impl<T: Real> VaeGan<T> for LesionSynthNet<T> {
    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.encoder.forward(x)
    }

    fn decode(&self, z: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        if self.conditioning_frozen {
            return self.decoder.forward(z, |_, h| Ok(h.clone()));
        }
        if let [_, _, s, ..] = *mask.shape() {
            if s != self.cfg.side {
                return Err(Error::Resolution {
                    expected: self.cfg.side,
                    actual: s,
                });
            }
        }
        self.decoder.forward(z, |j, h| self.mebs[j].modulate(h, mask))
    }

    fn critic(&self) -> &CriticNet<T> {
        &self.critic
    }

    fn critic_mut(&mut self) -> &mut CriticNet<T> {
        &mut self.critic
    }

    fn generator_params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        if !self.conditioning_frozen {
            out.extend(self.mebs.iter().flat_map(|m| m.params()));
        }
        out
    }

    fn generator_params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        if !self.conditioning_frozen {
            out.extend(self.mebs.iter_mut().flat_map(|m| m.params_mut()));
        }
        out
    }
}

impl<T: Real> Module<T> for LesionSynthNet<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        out.extend(self.mebs.iter().flat_map(|m| m.params()));
        out.extend(self.critic.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out.extend(self.mebs.iter_mut().flat_map(|m| m.params_mut()));
        out.extend(self.critic.params_mut());
        out
    }
}
