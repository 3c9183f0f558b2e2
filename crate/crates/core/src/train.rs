//! Alternating critic / generator training shared by both stages.

use pavae_autograd::{Real, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{condition_batch, encode_condition};
use crate::error::{Error, Result};
use crate::losses::{critic_loss, gen_adv_loss, kl_gaussian, recon_mse, Aggregation, GpConfig, LossReport, LossWeights};
use crate::models::{standard_normal, reparameterize, LesionSynthNet, MaskSynthNet, VaeGan};
use crate::nn::{collect_grads, AdamConfig, AdamState, Module};
use crate::phantom::SamplePair;
use crate::volume::{stack_masks, stack_volumes, MaskVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set: the exact number of generator steps.
    pub max_steps: Option<usize>,
    pub n_critic: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub gp_lambda: f64,
    pub aggregation: Aggregation,
    /// Skip and do not train the guidance blocks.
    pub freeze_conditioning: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            batch: 8,
            epochs: 100,
            max_steps: None,
            n_critic: 5,
            seed: 0,
            weights: LossWeights::default(),
            gp_lambda: 10.0,
            aggregation: Aggregation::Mean,
            freeze_conditioning: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |reason: &str| Err(Error::invalid("train config", reason.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch == 0 || (self.max_steps.is_none() && self.epochs == 0) || self.max_steps == Some(0) {
            return bad("batch and step counts must be positive");
        }
        if self.n_critic == 0 {
            return bad("n_critic must be positive");
        }
        if !(self.gp_lambda >= 0.0) {
            return bad("gp_lambda must be non-negative");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Generator steps for a dataset of `samples` items.
    pub fn steps(&self, samples: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * samples.div_ceil(self.batch.min(samples).max(1)))
    }

    fn adversarial(&self) -> bool {
        self.weights.w_adv > 0.0
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed-derived generator for weight initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, 0)
}

/// Rows `idx` of the leading axis, as a constant tensor.
pub fn select_rows<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let n = *t.shape().first().ok_or_else(|| Error::invalid("batch", "rank-0 tensor"))?;
    let per = if n == 0 { 0 } else { t.numel() / n };
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        if i >= n {
            return Err(Error::invalid("batch index", format!("{i} out of {n}")));
        }
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Ok(Tensor::from_vec(shape, data)?)
}

fn finite(step: usize, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} at step {step}")))
    }
}

struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(samples: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..samples).collect(),
            pos: samples,
            batch: batch.min(samples),
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Trains one stage on `inputs: [M, 1, S, S, S]` with per-sample guides
/// (`[M, k]` conditions or `[M, 1, S, S, S]` masks). Each generator step is
/// preceded by `n_critic` critic updates against the same real batch and
/// the current reconstruction; with `w_adv = 0` the critic is not used.
/// `on_step` sees every report as it is produced.
pub fn train_stage<T: Real, N: VaeGan<T>>(
    net: &mut N,
    inputs: &Tensor<T>,
    guides: &Tensor<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    let samples = *inputs.shape().first().unwrap_or(&0);
    if samples == 0 || guides.shape().first() != Some(&samples) {
        return Err(Error::invalid(
            "training data",
            format!("inputs {:?} and guides {:?}", inputs.shape(), guides.shape()),
        ));
    }
    if !inputs.is_finite() || !guides.is_finite() {
        return Err(Error::NonFinite("training data".into()));
    }
    let steps = cfg.steps(samples);
    let mut batches = Batches::new(samples, cfg.batch, stream(cfg.seed, 1));
    let mut noise_rng = stream(cfg.seed, 2);
    let mut gp_rng = stream(cfg.seed, 3);
    let gp = GpConfig {
        lambda: cfg.gp_lambda,
        seed: cfg.seed,
    };
    let mut gen_opt = AdamState::new(cfg.adam());
    let mut critic_opt = AdamState::new(cfg.adam());
    let w = cfg.weights;
    let mut log = Vec::with_capacity(steps);

    for step in 0..steps {
        let idx = batches.next();
        let x_r = select_rows(inputs, &idx)?;
        let guide = select_rows(guides, &idx)?;

        let tape = Tape::new();
        for p in net.generator_params_mut() {
            p.attach(&tape);
        }
        let (mu, logvar) = net.encode(&x_r)?;
        let eps = standard_normal(mu.shape(), &mut noise_rng);
        let z = reparameterize(&mu, &logvar, &eps)?;
        let x_g = net.decode(&z, &guide)?;
        let l_rec = recon_mse(&x_g, &x_r, cfg.aggregation)?;
        let l_kl = kl_gaussian(&mu, &logvar, cfg.aggregation)?;

        let mut report = LossReport::default();
        if cfg.adversarial() {
            let fake = x_g.detach();
            for _ in 0..cfg.n_critic {
                let ctape = Tape::higher_order();
                net.critic_mut().attach(&ctape);
                let loss = critic_loss(net.critic(), &ctape, &x_r, &fake, &gp, &mut gp_rng)?;
                report.l_d = finite(step, "critic loss", loss.wasserstein.item()?.as_f64())?;
                report.gp_term = finite(step, "gradient penalty", loss.penalty.item()?.as_f64())?;
                let grads = ctape.backward(&loss.total, false)?;
                collect_grads(net.critic_mut().params_mut(), &grads)?;
                net.critic_mut().detach();
                critic_opt.step(net.critic_mut().params_mut())?;
            }
            report.total_critic = report.l_d + report.gp_term;
        }

        let mut total = l_rec.mul_scalar(T::from_f64_lossy(w.w_rec))?;
        total = total.add(&l_kl.mul_scalar(T::from_f64_lossy(w.w_kl))?)?;
        if cfg.adversarial() {
            let l_g = gen_adv_loss(net.critic(), &x_g)?;
            report.l_g = finite(step, "adversarial loss", l_g.item()?.as_f64())?;
            total = total.add(&l_g.mul_scalar(T::from_f64_lossy(w.w_adv))?)?;
        }
        report.l_rec = finite(step, "reconstruction loss", l_rec.item()?.as_f64())?;
        report.l_kl = finite(step, "KL loss", l_kl.item()?.as_f64())?;
        report.total_gen = w.total_gen(report.l_rec, report.l_kl, report.l_g);

        let grads = tape.backward(&total, false)?;
        collect_grads(net.generator_params_mut(), &grads)?;
        for p in net.generator_params_mut() {
            p.detach();
        }
        gen_opt.step(net.generator_params_mut())?;

        on_step(step, &report);
        log.push(report);
    }
    Ok(log)
}

/// Trains the mask stage; conditions come from the ground-truth masks and
/// their range is stored on the network for sampling.
pub fn train_mask_stage<T: Real>(
    net: &mut MaskSynthNet<T>,
    masks: &[&MaskVolume],
    cfg: &TrainConfig,
    on_step: impl FnMut(usize, &LossReport),
) -> Result<Vec<LossReport>> {
    check_sides(masks.iter().map(|m| m.side()), net.cfg.side)?;
    let conditions = masks.iter().map(|m| encode_condition(m)).collect::<Result<Vec<_>>>()?;
    let lo = conditions.iter().map(|c| c.values[0]).fold(f64::INFINITY, f64::min);
    let hi = conditions.iter().map(|c| c.values[0]).fold(f64::NEG_INFINITY, f64::max);
    net.cond_range = (lo, hi);
    net.conditioning_frozen = cfg.freeze_conditioning;
    let inputs = stack_masks(masks)?;
    let guides = condition_batch(&conditions)?;
    train_stage(net, &inputs, &guides, cfg, on_step)
}

/// Trains the lesion stage with each pair's ground-truth mask as guidance.
pub fn train_lesion_stage<T: Real>(
    net: &mut LesionSynthNet<T>,
    pairs: &[&SamplePair],
    cfg: &TrainConfig,
    on_step: impl FnMut(usize, &LossReport),
) -> Result<Vec<LossReport>> {
    check_sides(pairs.iter().map(|p| p.lesion.side()), net.cfg.side)?;
    net.conditioning_frozen = cfg.freeze_conditioning;
    let inputs = stack_volumes(&pairs.iter().map(|p| &p.lesion).collect::<Vec<_>>())?;
    let guides = stack_masks(&pairs.iter().map(|p| &p.mask).collect::<Vec<_>>())?;
    train_stage(net, &inputs, &guides, cfg, on_step)
}

fn check_sides(sides: impl Iterator<Item = Option<usize>>, expected: usize) -> Result<()> {
    for s in sides {
        match s {
            Some(s) if s == expected => {}
            Some(actual) => return Err(Error::Resolution { expected, actual }),
            None => return Err(Error::invalid("training volume", "not a cube")),
        }
    }
    Ok(())
}

/// Mean of the last `window` reconstruction losses.
pub fn smoothed_recon(log: &[LossReport], window: usize) -> f64 {
    let tail = &log[log.len().saturating_sub(window.max(1))..];
    tail.iter().map(|r| r.l_rec).sum::<f64>() / tail.len().max(1) as f64
}
