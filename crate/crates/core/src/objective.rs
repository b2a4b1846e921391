//! Training losses: WGAN-GP adversarial terms, pixel L2 reconstruction and the
//! view-consistency reward, combined by a fixed weighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Tensor, Var};
use crate::error::{Error, Result};
use crate::gan::PatchDiscriminator;
use crate::nn::per_sample_mean;
use crate::vcn::VcnParams;

/// Anything producing a score map from an image batch and its condition.
pub trait Critic {
    fn critique(&self, x: &Var, c: &Var) -> Result<Var>;
}

impl Critic for PatchDiscriminator {
    fn critique(&self, x: &Var, c: &Var) -> Result<Var> {
        self.scores(x, c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub adv: f64,
    pub recon: f64,
    pub vc: f64,
    pub gp_coefficient: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            recon: 100.0,
            vc: -1.0,
            gp_coefficient: 10.0,
        }
    }
}

impl LossWeights {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (k, v) in [
            ("adv", self.adv),
            ("recon", self.recon),
            ("vc", self.vc),
            ("gp_coefficient", self.gp_coefficient),
        ] {
            if !v.is_finite() {
                p.push(format!("weights.{k}: must be finite"));
            }
        }
        if self.recon < 0.0 {
            p.push("weights.recon: must be >= 0".into());
        }
        if self.gp_coefficient < 0.0 {
            p.push("weights.gp_coefficient: must be >= 0".into());
        }
        p
    }
}

fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Per-sample interpolation weights for the gradient penalty.
pub fn sample_epsilon(rng: &mut impl Rng, n: usize) -> Tensor {
    Tensor::new(&[n], (0..n).map(|_| rng.gen::<f64>()).collect())
}

/// Mean critic score per sample, `[N, 1]`.
fn critic_means(critic: &dyn Critic, x: &Var, c: &Var) -> Result<Var> {
    Ok(per_sample_mean(&critic.critique(x, c)?))
}

/// `mean_i (||grad_x D(x_hat_i)|| - 1)^2` with `x_hat = eps real + (1 - eps) fake`.
pub fn gradient_penalty(critic: &dyn Critic, real: &Var, fake: &Var, c: &Var, eps: &Tensor) -> Result<Var> {
    same_shape(real, fake, "gradient penalty inputs")?;
    let n = real.shape()[0];
    if eps.shape() != [n] {
        return Err(Error::shape(format!("epsilon must have {n} entries")));
    }
    let per = real.value().numel() / n;
    let mut mix = Vec::with_capacity(n * per);
    for i in 0..n {
        let e = eps.data()[i];
        let r = &real.value().data()[i * per..(i + 1) * per];
        let f = &fake.value().data()[i * per..(i + 1) * per];
        mix.extend(r.iter().zip(f).map(|(r, f)| e * r + (1.0 - e) * f));
    }
    let x_hat = Var::leaf(Tensor::new(real.shape(), mix), true);
    let d = critic_means(critic, &x_hat, c)?.sum();
    let g = grad(&d, &[&x_hat], true).remove(0);
    let norms = g.square().reshape(&[n, per]).sum_to(&[n, 1]).sqrt();
    Ok(norms.add_scalar(-1.0).square().mean())
}

/// `E[D(fake)] - E[D(real)] + lambda gp`, returned with `gp`.
pub fn critic_loss(
    critic: &dyn Critic,
    real: &Var,
    fake: &Var,
    c: &Var,
    eps: &Tensor,
    gp_coefficient: f64,
) -> Result<(Var, Var)> {
    same_shape(real, fake, "critic inputs")?;
    let d_real = critic_means(critic, real, c)?.mean();
    let d_fake = critic_means(critic, fake, c)?.mean();
    let gp = gradient_penalty(critic, real, fake, c, eps)?;
    Ok((d_fake.sub(&d_real).add(&gp.scale(gp_coefficient)), gp))
}

/// `-E[D(fake)]`.
pub fn generator_adversarial_loss(critic: &dyn Critic, fake: &Var, c: &Var) -> Result<Var> {
    Ok(critic_means(critic, fake, c)?.mean().neg())
}

pub struct WganLosses {
    pub adv_d: Var,
    pub adv_g: Var,
    pub gp: Var,
}

pub fn wgan_gp_losses(
    critic: &dyn Critic,
    real: &Var,
    fake: &Var,
    c: &Var,
    eps: &Tensor,
    gp_coefficient: f64,
) -> Result<WganLosses> {
    let (adv_d, gp) = critic_loss(critic, real, fake, c, eps, gp_coefficient)?;
    let adv_g = generator_adversarial_loss(critic, fake, c)?;
    Ok(WganLosses { adv_d, adv_g, gp })
}

/// Mean squared pixel difference.
pub fn reconstruction_loss(fake: &Var, real: &Var) -> Result<Var> {
    same_shape(fake, real, "reconstruction")?;
    Ok(fake.sub(real).square().mean())
}

/// Mean consistency score of generated pairs under a frozen VCN.
pub fn view_consistency_reward(frontal: &Var, lateral: &Var, stage: usize, vcn: &VcnParams) -> Result<Var> {
    if vcn.stage != stage {
        return Err(Error::invalid(format!(
            "VCN was trained for stage {}, not stage {stage}",
            vcn.stage
        )));
    }
    Ok(vcn.score_batch(frontal, lateral)?.mean())
}

/// `w_adv adv + w_recon recon + w_vc vc`.
pub fn total_generator_loss(adv: &Var, recon: &Var, vc: &Var, weights: &LossWeights) -> Result<Var> {
    for (name, v) in [
        ("adversarial", adv),
        ("reconstruction", recon),
        ("view consistency", vc),
    ] {
        if !v.value().all_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    Ok(adv
        .scale(weights.adv)
        .add(&recon.scale(weights.recon))
        .add(&vc.scale(weights.vc)))
}

/// Scalar form of [`total_generator_loss`]; same operation order.
pub fn weighted_total(adv: f64, recon: f64, vc: f64, weights: &LossWeights) -> Result<f64> {
    if !(adv.is_finite() && recon.is_finite() && vc.is_finite()) {
        return Err(Error::NonFinite("loss component".into()));
    }
    Ok(adv * weights.adv + recon * weights.recon + vc * weights.vc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewLosses {
    pub adv_g: f64,
    pub adv_d: f64,
    pub gp: f64,
    pub recon: f64,
}

/// One training step's losses. `adv_g` and `recon` are sums over both views,
/// so `total_g = w_adv adv_g + w_recon recon + w_vc vc_reward`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: usize,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub frontal: ViewLosses,
    pub lateral: ViewLosses,
    pub adv_g: f64,
    pub adv_d: f64,
    pub gp: f64,
    pub recon: f64,
    pub vc_reward: f64,
    pub total_g: f64,
}
