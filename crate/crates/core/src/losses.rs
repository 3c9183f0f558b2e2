//! Training objectives: reconstruction, KL, and the Wasserstein critic and
//! generator losses with gradient penalty.

use pavae_autograd::{Real, Tape, Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything that scores a `[N, ...]` batch with one unbounded real per sample.
pub trait Critic<T: Real> {
    fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

/// How per-sample terms are combined over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Aggregation {
    /// Mean over batch (and voxels for the reconstruction term).
    #[default]
    Mean,
    /// Plain sums over every index.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_rec: f64,
    pub w_kl: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_rec: 1.0,
            w_kl: 1.0,
            w_adv: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_rec, self.w_kl, self.w_adv];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || all.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid(
                "loss weights",
                format!("{all:?}: must be non-negative with at least one positive"),
            ));
        }
        Ok(())
    }

    pub fn total_gen(&self, l_rec: f64, l_kl: f64, l_g: f64) -> f64 {
        self.w_rec * l_rec + self.w_kl * l_kl + self.w_adv * l_g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub lambda: f64,
    /// Seed of the interpolation-coefficient stream.
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self { lambda: 10.0, seed: 0 }
    }
}

/// Per-step values of every objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub gp_term: f64,
    pub total_gen: f64,
    pub total_critic: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_rec,l_kl,l_g,l_d,gp_term,total_gen,total_critic";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.l_rec, self.l_kl, self.l_g, self.l_d, self.gp_term, self.total_gen, self.total_critic
        )
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

fn batch_size<T: Real>(t: &Tensor<T>) -> Result<usize> {
    t.shape()
        .first()
        .copied()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::invalid("batch", format!("shape {:?} has no samples", t.shape())))
}

/// Squared reconstruction error, averaged (or summed) over batch and voxels.
pub fn recon_mse<T: Real>(x_g: &Tensor<T>, x_r: &Tensor<T>, agg: Aggregation) -> Result<Tensor<T>> {
    same_shape("recon_mse", x_g, x_r)?;
    let sq = x_g.sub(x_r)?.square()?;
    Ok(match agg {
        Aggregation::Mean => sq.mean()?,
        Aggregation::Sum => sq.sum()?,
    })
}

/// KL divergence of `N(mu, exp(logvar))` from `N(0, I)` for `[N, L]`
/// inputs: summed over latent dimensions, then averaged (or summed) over
/// the batch.
pub fn kl_gaussian<T: Real>(mu: &Tensor<T>, logvar: &Tensor<T>, agg: Aggregation) -> Result<Tensor<T>> {
    same_shape("kl_gaussian", mu, logvar)?;
    if !mu.is_finite() || !logvar.is_finite() {
        return Err(Error::NonFinite("KL input".into()));
    }
    let n = batch_size(mu)?;
    // 1 + lv − mu² − exp(lv), summed then scaled by −½.
    let inner = logvar
        .add_scalar(T::one())?
        .sub(&mu.square()?)?
        .sub(&logvar.exp()?)?;
    let total = inner.sum()?.mul_scalar(T::from_f64_lossy(-0.5))?;
    Ok(match agg {
        Aggregation::Mean => total.mul_scalar(T::from_f64_lossy(1.0 / n as f64))?,
        Aggregation::Sum => total,
    })
}

/// Numerical floor inside the gradient norm's square root.
const NORM_EPS: f64 = 1e-12;

/// `λ · mean_i (‖∇D(x̂_i)‖₂ − 1)²` with `x̂_i = u_i·x_r,i + (1 − u_i)·x_g,i`
/// and one `u_i ~ U(0, 1)` per sample. The critic's parameters should be
/// watched by `tape`, which must record its reverse pass so the result can be
/// differentiated with respect to them.
pub fn gradient_penalty<T: Real, C: Critic<T> + ?Sized, R: Rng + ?Sized>(
    critic: &C,
    tape: &Tape<T>,
    x_r: &Tensor<T>,
    x_g: &Tensor<T>,
    cfg: &GpConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !tape.records_reverse() {
        return Err(TensorError::HigherOrderDisabled.into());
    }
    same_shape("gradient_penalty", x_r, x_g)?;
    if !(cfg.lambda >= 0.0) {
        return Err(Error::invalid("gp lambda", cfg.lambda.to_string()));
    }
    let n = batch_size(x_r)?;
    let mut u_shape = vec![1; x_r.rank()];
    u_shape[0] = n;
    let u: Vec<T> = (0..n).map(|_| T::from_f64_lossy(rng.gen::<f64>())).collect();
    let u = Tensor::from_vec(u_shape, u)?;
    let (x_r, x_g) = (x_r.detach(), x_g.detach());
    let x_hat = x_g.add(&u.mul(&x_r.sub(&x_g)?)?)?;
    let x_hat = tape.watch(&x_hat);

    let scores = critic.score(&x_hat)?;
    let grads = tape.grad(&scores.sum()?, &[&x_hat], true)?;
    let axes: Vec<usize> = (1..x_hat.rank()).collect();
    let sq = grads[0].square()?;
    let sq = if axes.is_empty() { sq } else { sq.sum_axes(&axes, false)? };
    let norms = sq.add_scalar(T::from_f64_lossy(NORM_EPS))?.sqrt()?;
    let dev = norms.add_scalar(-T::one())?.square()?.mean()?;
    Ok(dev.mul_scalar(T::from_f64_lossy(cfg.lambda))?)
}

/// Components of the critic objective.
#[derive(Debug, Clone)]
pub struct CriticLoss<T: Real> {
    /// `mean D(x_g) − mean D(x_r)`.
    pub wasserstein: Tensor<T>,
    pub penalty: Tensor<T>,
    pub total: Tensor<T>,
}

/// `mean D(x_g) − mean D(x_r) + gradient_penalty`.
pub fn critic_loss<T: Real, C: Critic<T> + ?Sized, R: Rng + ?Sized>(
    critic: &C,
    tape: &Tape<T>,
    x_r: &Tensor<T>,
    x_g: &Tensor<T>,
    cfg: &GpConfig,
    rng: &mut R,
) -> Result<CriticLoss<T>> {
    same_shape("critic_loss", x_r, x_g)?;
    let fake = critic.score(&x_g.detach())?.mean()?;
    let real = critic.score(&x_r.detach())?.mean()?;
    let wasserstein = fake.sub(&real)?;
    let penalty = gradient_penalty(critic, tape, x_r, x_g, cfg, rng)?;
    let total = wasserstein.add(&penalty)?;
    Ok(CriticLoss {
        wasserstein,
        penalty,
        total,
    })
}

/// `−mean D(x_g)`.
pub fn gen_adv_loss<T: Real, C: Critic<T> + ?Sized>(critic: &C, x_g: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(critic.score(x_g)?.mean()?.neg()?)
}
