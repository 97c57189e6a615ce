//! Training objectives.
//!
//! All composite losses share one skeleton:
//!
//! ```text
//! total = (recon + kl) - lambda * adversarial + ee
//! ```
//!
//! where `recon` is the Gaussian negative log-likelihood of the observations
//! under one reparameterized latent sample, `kl` sums the per-dimension GP
//! KL terms, `adversarial` is the discriminator loss evaluated on batches
//! built from the current posterior means, and `ee` is the optional
//! external-enhancement penalty. Variants without an adversary or penalty
//! simply omit those terms.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gp::{ee_penalty_graph, EeCoefficients, GpPriorSet, EE_FLOOR};
use crate::models::{latent_sample, BoundModel, Discriminator, ModelParams};

/// Gaussian NLL `sum (x - x_hat)^2 / (2 v) + (m T / 2) ln(2 pi v)`.
pub fn reconstruction_nll(g: &mut Graph, x: Var, x_hat: Var, obs_var: f64) -> Result<Var> {
    if g.value(x).shape() != g.value(x_hat).shape() {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_nll",
            left: g.value(x).shape().to_vec(),
            right: g.value(x_hat).shape().to_vec(),
        });
    }
    if !(obs_var > 0.0) {
        return Err(Error::NonPositive {
            what: "observation variance",
            value: obs_var,
        });
    }
    let count = g.value(x).numel() as f64;
    let r = g.sub(x, x_hat)?;
    let r2 = g.square(r)?;
    let s = g.sum(r2)?;
    let s = g.scale(s, 1.0 / (2.0 * obs_var))?;
    g.shift(s, 0.5 * count * (2.0 * std::f64::consts::PI * obs_var).ln())
}

/// Time indices for one adversarial batch: a shared index per joint row and
/// an independent permutation per latent dimension for the marginal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub joint: Vec<usize>,
    /// `marginal[i][b]` is the time index dimension `i` contributes to row `b`.
    pub marginal: Vec<Vec<usize>>,
}

impl BatchPlan {
    /// Draws `batch <= t` joint indices without replacement and one fresh
    /// permutation of `0..t` per dimension.
    pub fn draw<R: Rng + ?Sized>(n: usize, t: usize, batch: usize, rng: &mut R) -> Result<Self> {
        if batch == 0 || batch > t {
            return Err(Error::Usage(format!("adversarial batch {batch} must be in 1..={t}")));
        }
        let perm = |rng: &mut R| {
            let mut p: Vec<usize> = (0..t).collect();
            p.shuffle(rng);
            p.truncate(batch);
            p
        };
        let joint = perm(rng);
        let marginal = (0..n).map(|_| perm(rng)).collect();
        Ok(BatchPlan { joint, marginal })
    }

    pub fn batch(&self) -> usize {
        self.joint.len()
    }
}

/// Joint and marginal rows, both `[B, n]`, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct AdversarialBatch {
    pub joint: Var,
    pub marginal: Var,
}

/// Row `b` is `(mu[0, idx[b]], ..., mu[n-1, idx[b]])`.
pub fn make_joint_batch(g: &mut Graph, mu: Var, indices: &[usize]) -> Result<Var> {
    let (n, t) = matrix_dims(g, mu, "make_joint_batch")?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= t) {
        return Err(Error::IndexOutOfRange { index: bad, len: t });
    }
    let flat = indices
        .iter()
        .flat_map(|&tau| (0..n).map(move |i| i * t + tau))
        .collect();
    g.gather(mu, vec![indices.len(), n], flat)
}

/// Row `b` is `(mu[0, perms[0][b]], ..., mu[n-1, perms[n-1][b]])`.
pub fn make_marginal_batch(g: &mut Graph, mu: Var, perms: &[Vec<usize>]) -> Result<Var> {
    let (n, t) = matrix_dims(g, mu, "make_marginal_batch")?;
    if perms.len() != n {
        return Err(Error::ShapeMismatch {
            op: "make_marginal_batch",
            left: vec![n, t],
            right: vec![perms.len()],
        });
    }
    let batch = perms[0].len();
    if perms.iter().any(|p| p.len() != batch) {
        return Err(Error::Usage("ragged marginal permutations".into()));
    }
    if let Some(&bad) = perms.iter().flatten().find(|&&i| i >= t) {
        return Err(Error::IndexOutOfRange { index: bad, len: t });
    }
    let flat = (0..batch)
        .flat_map(|b| perms.iter().enumerate().map(move |(i, p)| i * t + p[b]))
        .collect();
    g.gather(mu, vec![batch, n], flat)
}

impl AdversarialBatch {
    pub fn build(g: &mut Graph, mu: Var, plan: &BatchPlan) -> Result<Self> {
        Ok(AdversarialBatch {
            joint: make_joint_batch(g, mu, &plan.joint)?,
            marginal: make_marginal_batch(g, mu, &plan.marginal)?,
        })
    }
}

fn matrix_dims(g: &Graph, v: Var, op: &'static str) -> Result<(usize, usize)> {
    g.value(v).dims2().ok_or_else(|| Error::ShapeMismatch {
        op,
        left: g.value(v).shape().to_vec(),
        right: vec![],
    })
}

/// `-mean log D(marginal) - mean log(1 - D(joint))`.
pub fn discriminator_loss(g: &mut Graph, disc: &Discriminator, vars: &[Var], batch: AdversarialBatch) -> Result<Var> {
    let p_mar = disc.forward(g, vars, batch.marginal)?;
    let p_joint = disc.forward(g, vars, batch.joint)?;
    let log_mar = g.log(p_mar)?;
    let mean_mar = g.mean(log_mar)?;
    let one = g.scalar(1.0);
    let q_joint = g.sub(one, p_joint)?;
    let log_joint = g.log(q_joint)?;
    let mean_joint = g.mean(log_joint)?;
    let s = g.add(mean_mar, mean_joint)?;
    g.neg(s)
}

/// Scalar loss components as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    /// Discriminator loss seen by the main step; zero when inactive.
    pub adversarial: f64,
    pub lambda: f64,
    /// External-enhancement penalty; zero when disabled.
    pub ee: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the total in the same order as the graph does.
    pub fn composed_total(&self) -> f64 {
        ((self.recon + self.kl) - self.lambda * self.adversarial) + self.ee
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("kl", self.kl),
            ("adversarial", self.adversarial),
            ("ee", self.ee),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// Graph nodes of one composite loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub recon: Var,
    pub kl: Var,
    pub adversarial: Option<Var>,
    pub lambda: f64,
    pub ee: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossBreakdown {
            recon: g.value(self.recon).item(),
            kl: g.value(self.kl).item(),
            adversarial: val(self.adversarial),
            lambda: if self.adversarial.is_some() { self.lambda } else { 0.0 },
            ee: val(self.ee),
            total: g.value(self.total).item(),
        }
    }
}

/// Fixed objective settings shared by every step of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub obs_var: f64,
    pub ee: Option<EeCoefficients>,
}

/// Posterior parameters as graph nodes: means `[n, T]`, log-variances `[n]`.
#[derive(Debug, Clone, Copy)]
pub struct Posterior {
    pub mu: Var,
    pub log_var: Var,
}

/// Reconstruction + KL (+ EE) for a given posterior.
fn elbo_terms(
    g: &mut Graph,
    model: &ModelParams,
    bound: &BoundModel,
    post: Posterior,
    x: Var,
    noise: &Tensor,
    settings: &LossSettings,
) -> Result<(Var, Var, Option<Var>)> {
    let n = model.latent_dims();
    let (mn, _) = matrix_dims(g, post.mu, "elbo")?;
    if mn != n || g.value(post.log_var).numel() != n {
        return Err(Error::ShapeMismatch {
            op: "elbo",
            left: vec![mn],
            right: vec![n],
        });
    }
    let z = latent_sample(g, post.mu, post.log_var, noise)?;
    let zt = g.transpose(z)?;
    let x_hat_t = model.decoder.forward(g, &bound.decoder, zt)?;
    let x_hat = g.transpose(x_hat_t)?;
    let recon = reconstruction_nll(g, x, x_hat, settings.obs_var)?;

    let kl = kl_total(g, &model.priors, bound.log_length_scales, post)?;

    let ee = match &settings.ee {
        Some(coeffs) => {
            let ls = g.exp(bound.log_length_scales)?;
            let vars = g.exp(post.log_var)?;
            Some(ee_penalty_graph(g, ls, vars, coeffs, EE_FLOOR)?)
        }
        None => None,
    };
    Ok((recon, kl, ee))
}

/// Sum over dimensions of KL(N(mu_i, s_i^2 I) || GP_i).
pub fn kl_total(g: &mut Graph, priors: &GpPriorSet, log_length_scales: Var, post: Posterior) -> Result<Var> {
    let ls = g.exp(log_length_scales)?;
    let vars = g.exp(post.log_var)?;
    let mut total: Option<Var> = None;
    for i in 0..priors.dims() {
        let mu_i = g.row(post.mu, i)?;
        let var_i = g.element(vars, i)?;
        let ls_i = g.element(ls, i)?;
        let kl_i = g.gp_kl(mu_i, var_i, ls_i, priors.grid(), priors.jitter())?;
        total = Some(match total {
            Some(acc) => g.add(acc, kl_i)?,
            None => kl_i,
        });
    }
    total.ok_or_else(|| Error::Usage("no latent dimensions".into()))
}

fn compose(g: &mut Graph, recon: Var, kl: Var, adversarial: Option<(Var, f64)>, ee: Option<Var>) -> Result<LossTerms> {
    let mut total = g.add(recon, kl)?;
    if let Some((adv, lambda)) = adversarial {
        let weighted = g.scale(adv, lambda)?;
        total = g.sub(total, weighted)?;
    }
    if let Some(ee) = ee {
        total = g.add(total, ee)?;
    }
    Ok(LossTerms {
        recon,
        kl,
        adversarial: adversarial.map(|(v, _)| v),
        lambda: adversarial.map_or(0.0, |(_, l)| l),
        ee,
        total,
    })
}

fn bank_posterior(bound: &BoundModel) -> Result<Posterior> {
    bound
        .bank
        .map(|(mu, log_var)| Posterior { mu, log_var })
        .ok_or_else(|| Error::Usage("encoder-free loss needs a latent bank".into()))
}

/// Encoder-free loss: reconstruction + KL (+ EE).
pub fn half_vae_loss(
    g: &mut Graph,
    model: &ModelParams,
    bound: &BoundModel,
    x: Var,
    noise: &Tensor,
    settings: &LossSettings,
) -> Result<LossTerms> {
    let post = bank_posterior(bound)?;
    let (recon, kl, ee) = elbo_terms(g, model, bound, post, x, noise, settings)?;
    compose(g, recon, kl, None, ee)
}

fn adversarial_term(g: &mut Graph, model: &ModelParams, bound: &BoundModel, mu: Var, plan: &BatchPlan) -> Result<Var> {
    let (disc, vars) = match (&model.discriminator, &bound.discriminator) {
        (Some(d), Some(v)) => (d, v),
        _ => return Err(Error::Usage("adversarial loss needs a discriminator".into())),
    };
    let batch = AdversarialBatch::build(g, mu, plan)?;
    discriminator_loss(g, disc, vars, batch)
}

/// Encoder-free adversarial loss: `half_vae_loss - lambda * L_D`.
///
/// The adversarial rows are gathered from the live posterior means, so the
/// generator gradient reaches them through both joint and marginal rows.
/// Bind the model with [`crate::models::Trainable::Main`] to keep the
/// discriminator frozen.
#[allow(clippy::too_many_arguments)]
pub fn half_avae_loss(
    g: &mut Graph,
    model: &ModelParams,
    bound: &BoundModel,
    x: Var,
    noise: &Tensor,
    plan: &BatchPlan,
    lambda: f64,
    settings: &LossSettings,
) -> Result<LossTerms> {
    if !(lambda >= 0.0) {
        return Err(Error::Usage(format!("lambda must be non-negative, got {lambda}")));
    }
    let post = bank_posterior(bound)?;
    let (recon, kl, ee) = elbo_terms(g, model, bound, post, x, noise, settings)?;
    let adv = adversarial_term(g, model, bound, post.mu, plan)?;
    compose(g, recon, kl, Some((adv, lambda)), ee)
}

/// Encoder-based adversarial loss; the posterior means come from the encoder.
///
/// With `plan = None` the adversarial term is omitted (plain GP-VAE ELBO).
#[allow(clippy::too_many_arguments)]
pub fn gp_avae_loss(
    g: &mut Graph,
    model: &ModelParams,
    bound: &BoundModel,
    x: Var,
    noise: &Tensor,
    plan: Option<&BatchPlan>,
    lambda: f64,
    settings: &LossSettings,
) -> Result<LossTerms> {
    if !(lambda >= 0.0) {
        return Err(Error::Usage(format!("lambda must be non-negative, got {lambda}")));
    }
    let (enc, (head_vars, log_var)) = match (&model.encoder, &bound.encoder) {
        (Some(e), Some((v, lv))) => (e, (v, *lv)),
        _ => return Err(Error::Usage("GP-AVAE loss needs an encoder".into())),
    };
    let mu = enc.forward(g, head_vars, x)?;
    let post = Posterior { mu, log_var };
    let (recon, kl, ee) = elbo_terms(g, model, bound, post, x, noise, settings)?;
    let adv = match plan {
        Some(plan) => Some((adversarial_term(g, model, bound, mu, plan)?, lambda)),
        None => None,
    };
    compose(g, recon, kl, adv, ee)
}

/// Encoder-free loss with an optional adversarial term, dispatching on the
/// model's posterior type. Used by the trainer.
#[allow(clippy::too_many_arguments)]
pub fn main_loss(
    g: &mut Graph,
    model: &ModelParams,
    bound: &BoundModel,
    x: Var,
    noise: &Tensor,
    plan: Option<&BatchPlan>,
    lambda: f64,
    settings: &LossSettings,
) -> Result<LossTerms> {
    if model.encoder.is_some() {
        return gp_avae_loss(g, model, bound, x, noise, plan, lambda, settings);
    }
    match plan {
        Some(plan) => half_avae_loss(g, model, bound, x, noise, plan, lambda, settings),
        None => half_vae_loss(g, model, bound, x, noise, settings),
    }
}
