//! Flat `key = value` run configuration. Lines starting with `#` and blank
//! lines are ignored; every key has a default and unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Aggregation, LossWeights};
use crate::models::NetConfig;
use crate::phantom::PhantomSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub side: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub cond_hidden: usize,
    pub meb_hidden: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub epochs: usize,
    /// 0 means "derive from epochs".
    pub max_steps: usize,
    pub n_critic: usize,
    pub gp_lambda: f64,
    pub w_rec: f64,
    pub w_kl: f64,
    pub w_adv: f64,
    pub seed: u64,
    /// Mask binarization threshold at sampling time.
    pub threshold: f64,
    /// Number of phantoms generated.
    pub count: usize,
    /// Samples drawn by `sample` and synthetic images added downstream.
    pub synth_count: usize,
    /// Phantoms held out for evaluation.
    pub test_count: usize,
    pub sum_losses: bool,
    pub freeze_conditioning: bool,
    /// Segmenter training epochs and width for the downstream experiment.
    pub seg_epochs: usize,
    pub seg_channels: usize,
    pub seg_lr: f64,
}

impl Default for Config {
    fn default() -> Self {
        let net = NetConfig::default();
        let train = TrainConfig::default();
        Self {
            side: net.side,
            levels: net.levels,
            base_channels: net.base_channels,
            latent_dim: net.latent_dim,
            cond_hidden: net.cond_hidden,
            meb_hidden: net.meb_hidden,
            lr: train.lr,
            beta1: train.beta1,
            beta2: train.beta2,
            batch: train.batch,
            epochs: train.epochs,
            max_steps: 0,
            n_critic: train.n_critic,
            gp_lambda: train.gp_lambda,
            w_rec: train.weights.w_rec,
            w_kl: train.weights.w_kl,
            w_adv: train.weights.w_adv,
            seed: 0,
            threshold: 0.5,
            count: 64,
            synth_count: 100,
            test_count: 16,
            sum_losses: false,
            freeze_conditioning: false,
            seg_epochs: 50,
            seg_channels: 8,
            seg_lr: 1e-3,
        }
    }
}

fn parse<V: FromStr>(line: usize, key: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|_| Error::Config {
        line,
        reason: format!("`{raw}` is not a valid value for {key}"),
    })
}

macro_rules! config_keys {
    ($($key:ident),* $(,)?) => {
        impl Config {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            fn set(&mut self, line: usize, key: &str, raw: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => self.$key = parse(line, key, raw)?,)*
                    _ => return Err(Error::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// Every key with its current value, one per line, in a form
            /// `parse_str` reads back.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", stringify!($key), self.$key).expect("write to string");)*
                out
            }
        }
    };
}

config_keys!(
    side, levels, base_channels, latent_dim, cond_hidden, meb_hidden, lr, beta1, beta2, batch, epochs,
    max_steps, n_critic, gp_lambda, w_rec, w_kl, w_adv, seed, threshold, count, synth_count, test_count,
    sum_losses, freeze_conditioning, seg_epochs, seg_channels, seg_lr,
);

impl Config {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                reason: format!("expected key = value, got `{body}`"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) && Self::KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    reason: format!("{key} set twice"),
                });
            }
            cfg.set(line, key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net().validate()?;
        self.train().validate()?;
        self.phantoms().validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("threshold", format!("{} is outside (0, 1)", self.threshold)));
        }
        if self.count == 0 || self.seg_epochs == 0 || self.seg_channels == 0 || !(self.seg_lr > 0.0) {
            return Err(Error::invalid("config", "count and segmenter settings must be positive"));
        }
        Ok(())
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            side: self.side,
            levels: self.levels,
            base_channels: self.base_channels,
            latent_dim: self.latent_dim,
            cond_hidden: self.cond_hidden,
            meb_hidden: self.meb_hidden,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            batch: self.batch,
            epochs: self.epochs,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            n_critic: self.n_critic,
            seed: self.seed,
            weights: LossWeights {
                w_rec: self.w_rec,
                w_kl: self.w_kl,
                w_adv: self.w_adv,
            },
            gp_lambda: self.gp_lambda,
            aggregation: if self.sum_losses { Aggregation::Sum } else { Aggregation::Mean },
            freeze_conditioning: self.freeze_conditioning,
        }
    }

    pub fn phantoms(&self) -> PhantomSpec {
        PhantomSpec::for_side(self.side, self.count)
    }
}
