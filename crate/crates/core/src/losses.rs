//! Training objective: disentanglement ratio, Charbonnier (or MSE)
//! reconstruction, and the variational term that trains the learned
//! variance.

use std::f64::consts::PI;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::{log_variance_from_vpred, posterior_mean_from_eps, NoiseSchedule};
use crate::error::{Error, Result};
use crate::unet::Representations;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub vlb_weight: f64,
    pub eps_div: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            gamma: 1e-3,
            vlb_weight: 1.0,
            eps_div: 1e-8,
        }
    }
}

impl LossWeights {
    /// `lambda1` may be zero (the disentanglement ablation); everything else
    /// except `vlb_weight` must be positive.
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lambda1)
            && self.lambda2 > 0.0
            && self.lambda2 <= 1.0
            && self.gamma > 0.0
            && self.vlb_weight >= 0.0
            && self.vlb_weight.is_finite()
            && self.eps_div > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Reconstruction penalty on the predicted noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    #[default]
    Charbonnier,
    Mse,
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// Euclidean norm of each sample's flattened difference, `[B]`.
fn per_sample_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = (a - b)?.flatten_from(1)?;
    Ok(d.sqr()?.sum(1)?.sqrt()?)
}

fn pairwise_sum(blocks: [&Tensor; 3]) -> Result<Tensor> {
    let [x, y, v] = blocks;
    let d = (per_sample_distance(x, y)? + per_sample_distance(x, v)?)?;
    Ok((d + per_sample_distance(y, v)?)?)
}

/// Sum of pairwise shared-block distances over the sum of pairwise
/// independent-block distances (plus `eps_div`), per sample, averaged over
/// the batch.
pub fn disentanglement_loss(reps: &Representations, eps_div: f64) -> Result<Tensor> {
    disentanglement_from_blocks(reps.shared(), reps.independent(), eps_div)
}

pub fn disentanglement_from_blocks(shared: [&Tensor; 3], independent: [&Tensor; 3], eps_div: f64) -> Result<Tensor> {
    for b in shared.iter().chain(independent.iter()) {
        check_same(shared[0], b)?;
        if b.rank() < 1 {
            return Err(Error::shape(&[1], b.dims()));
        }
    }
    let num = pairwise_sum(shared)?;
    let den = (pairwise_sum(independent)? + eps_div)?;
    Ok((num / den)?.mean_all()?)
}

/// Mean of `sqrt(d² + γ²)`.
pub fn charbonnier_loss(eps_pred: &Tensor, eps_true: &Tensor, gamma: f64) -> Result<Tensor> {
    check_same(eps_pred, eps_true)?;
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    let d = (eps_pred - eps_true)?;
    Ok((d.sqr()? + gamma * gamma)?.sqrt()?.mean_all()?)
}

pub fn mse_loss(eps_pred: &Tensor, eps_true: &Tensor) -> Result<Tensor> {
    check_same(eps_pred, eps_true)?;
    Ok((eps_pred - eps_true)?.sqr()?.mean_all()?)
}

pub fn reconstruction_loss(kind: ReconLoss, eps_pred: &Tensor, eps_true: &Tensor, gamma: f64) -> Result<Tensor> {
    match kind {
        ReconLoss::Charbonnier => charbonnier_loss(eps_pred, eps_true, gamma),
        ReconLoss::Mse => mse_loss(eps_pred, eps_true),
    }
}

/// Elementwise `KL(N(mean1, e^logvar1) ‖ N(mean2, e^logvar2))` in nats.
pub fn normal_kl(mean1: &Tensor, logvar1: &Tensor, mean2: &Tensor, logvar2: &Tensor) -> Result<Tensor> {
    let diff = (logvar2 - logvar1)?;
    let ratio = (logvar1 - logvar2)?.exp()?;
    let mean_term = ((mean1 - mean2)?.sqr()? * (logvar2.neg()?.exp()?))?;
    Ok((((diff - 1.0)? + ratio)? + mean_term)?.affine(0.5, 0.0)?)
}

/// Scalar form of [`normal_kl`].
pub fn normal_kl_scalar(mean1: f64, logvar1: f64, mean2: f64, logvar2: f64) -> f64 {
    0.5 * (-1.0 + logvar2 - logvar1 + (logvar1 - logvar2).exp() + (mean1 - mean2).powi(2) * (-logvar2).exp())
}

/// Argument `2u` such that the tanh-approximated standard normal CDF at `x`
/// equals `sigmoid(2u)`.
fn cdf_logit(x: &Tensor) -> Result<Tensor> {
    Ok(((x + x.powf(3.0)?.affine(0.044715, 0.0)?)? * (2.0 * (2.0 / PI).sqrt()))?)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?)
}

/// Elementwise negative log-likelihood of `x` (in `[-1, 1]`, 8-bit bins of
/// width 2/255) under `N(means, e^log_scales²)`. `log_scales` is the log
/// standard deviation. The normal CDF is the usual tanh approximation,
/// evaluated in log space so that bins far in either tail keep full
/// precision.
pub fn discretized_gaussian_nll(x: &Tensor, means: &Tensor, log_scales: &Tensor) -> Result<Tensor> {
    check_same(x, means)?;
    check_same(x, log_scales)?;
    let centered = (x - means)?;
    let inv_stdv = log_scales.neg()?.exp()?;
    let a = cdf_logit(&((&centered + 1.0 / 255.0)? * &inv_stdv)?)?;
    let b = cdf_logit(&((&centered - 1.0 / 255.0)? * &inv_stdv)?)?;
    // log σ(a), log(1 − σ(b)) and log(σ(a) − σ(b)) for a > b.
    let log_cdf_plus = softplus(&a.neg()?)?.neg()?;
    let log_one_minus_cdf_min = softplus(&b)?.neg()?;
    let gap = (&b - &a)?.exp()?.affine(-1.0, 1.0)?.log()?;
    let log_delta = ((gap + &log_cdf_plus)? + &log_one_minus_cdf_min)?;
    let low = x.lt(-0.999)?;
    let high = x.gt(0.999)?;
    let log_probs = low.where_cond(&log_cdf_plus, &high.where_cond(&log_one_minus_cdf_min, &log_delta)?)?;
    Ok(log_probs.neg()?)
}

/// Variational term for the learned variance. The reverse mean is built
/// from `eps_for_mean`, which callers pass detached so that only `v_pred`
/// receives gradient. Steps equal to 1 score `x0` by discretized NLL, later
/// steps by `KL(q(x_{t-1}|x_t,x0) ‖ p(x_{t-1}|x_t))`; the result is the
/// mean over all elements.
pub fn vlb_variance_loss(
    x0: &Tensor,
    x_t: &Tensor,
    steps: &[usize],
    eps_for_mean: &Tensor,
    v_pred: Option<&Tensor>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let v = v_pred.ok_or(Error::VarianceDisabled)?;
    check_same(x0, x_t)?;
    check_same(x0, eps_for_mean)?;
    check_same(x0, v)?;
    let b = x0.dim(0)?;
    if steps.len() != b {
        return Err(Error::shape(&[b], &[steps.len()]));
    }
    for &t in steps {
        sched.check_step(t)?;
    }

    let true_mean = crate::diffusion::q_posterior_mean(x0, x_t, steps, sched)?;
    // β̃_1 is zero; its log is never used because t = 1 takes the NLL branch.
    let true_logvar: Vec<f64> = steps
        .iter()
        .map(|&t| sched.posterior_variance(t).max(f64::MIN_POSITIVE).ln())
        .collect();
    let true_logvar = Tensor::from_vec(true_logvar, (b, 1, 1, 1), x0.device())?
        .to_dtype(x0.dtype())?
        .broadcast_as(x0.shape())?;

    let model_mean = posterior_mean_from_eps(x_t, eps_for_mean, steps, sched)?;
    let model_logvar = log_variance_from_vpred(v, steps, sched)?;

    let kl = normal_kl(&true_mean, &true_logvar, &model_mean, &model_logvar)?;
    let nll = discretized_gaussian_nll(x0, &model_mean, &model_logvar.affine(0.5, 0.0)?)?;
    let first: Vec<u8> = steps.iter().map(|&t| u8::from(t == 1)).collect();
    let first = Tensor::from_vec(first, (b, 1, 1, 1), x0.device())?.broadcast_as(x0.shape())?;
    Ok(first.where_cond(&nll, &kl)?.mean_all()?)
}

/// Scalar loss components; `total` carries the graph.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub disent: f64,
    pub recon: f64,
    pub vlb: Option<f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `λ1·disent + λ2·recon (+ vlb_weight·vlb)`.
pub fn combine(disent: &Tensor, recon: &Tensor, vlb: Option<&Tensor>, weights: &LossWeights) -> Result<LossTerms> {
    let mut total = ((disent * weights.lambda1)? + (recon * weights.lambda2)?)?;
    if let Some(vlb) = vlb {
        total = (total + (vlb * weights.vlb_weight)?)?;
    }
    Ok(LossTerms {
        total,
        disent: scalar(disent)?,
        recon: scalar(recon)?,
        vlb: vlb.map(scalar).transpose()?,
    })
}

/// Full objective from one forward pass.
pub fn total_loss(
    reps: &Representations,
    eps_pred: &Tensor,
    eps_true: &Tensor,
    weights: &LossWeights,
    recon: ReconLoss,
    vlb_term: Option<&Tensor>,
) -> Result<LossTerms> {
    weights.validate()?;
    let disent = disentanglement_loss(reps, weights.eps_div)?;
    let recon = reconstruction_loss(recon, eps_pred, eps_true, weights.gamma)?;
    combine(&disent, &recon, vlb_term, weights)
}
