//! Toy models shared by the gradient suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unmix::autodiff::{Graph, Tensor, Var};
use unmix::models::{Architecture, BoundModel, ModelParams, ModelVariant};
use unmix::objectives::{gp_avae_loss, half_avae_loss, half_vae_loss, BatchPlan, LossSettings, LossTerms};
use unmix::Result;

pub const T: usize = 8;
pub const N: usize = 2;
pub const M: usize = 1;

pub fn toy(variant: ModelVariant, seed: u64) -> (ModelParams, Tensor, Tensor, BatchPlan) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture {
        hidden: vec![4],
        init_length_scales: [0.12, 0.3],
        init_log_var: -2.0,
        ..Architecture::default()
    };
    let mut model = ModelParams::init(variant, T, M, N, &arch, &mut rng).unwrap();
    if let Some(b) = model.bank.as_mut() {
        b.mu.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let x = Tensor::new(vec![M, T], (0..T).map(|i| (0.8 * i as f64).sin()).collect()).unwrap();
    let noise = Tensor::new(vec![N, T], (0..N * T).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let plan = BatchPlan::draw(N, T, T, &mut rng).unwrap();
    (model, x, noise, plan)
}

/// Every trainable tensor in the order [`rebind`] expects.
pub fn flatten(model: &ModelParams) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = model.decoder.params().into_iter().cloned().collect();
    if let Some(e) = &model.encoder {
        out.extend(e.mean_head.params().into_iter().cloned());
        out.push(e.log_var.clone());
    }
    if let Some(b) = &model.bank {
        out.push(b.mu.clone());
        out.push(b.log_var.clone());
    }
    if let Some(d) = &model.discriminator {
        out.extend(d.net.params().into_iter().cloned());
    }
    out.push(model.priors.log_length_scales().clone());
    out
}

pub fn rebind(model: &ModelParams, vars: &[Var]) -> BoundModel {
    let mut it = vars.iter().copied();
    let mut take = |k: usize| (&mut it).take(k).collect::<Vec<_>>();
    let decoder = take(model.decoder.params().len());
    let encoder = model.encoder.as_ref().map(|e| {
        let head = take(e.mean_head.params().len());
        (head, take(1)[0])
    });
    let bank = model.bank.as_ref().map(|_| {
        let v = take(2);
        (v[0], v[1])
    });
    let discriminator = model.discriminator.as_ref().map(|d| take(d.net.params().len()));
    let log_length_scales = take(1)[0];
    BoundModel {
        decoder,
        encoder,
        bank,
        discriminator,
        log_length_scales,
    }
}

pub type LossFn =
    fn(&mut Graph, &ModelParams, &BoundModel, Var, &Tensor, &BatchPlan, &LossSettings) -> Result<LossTerms>;

pub fn half_vae(
    g: &mut Graph,
    m: &ModelParams,
    b: &BoundModel,
    x: Var,
    n: &Tensor,
    _: &BatchPlan,
    s: &LossSettings,
) -> Result<LossTerms> {
    half_vae_loss(g, m, b, x, n, s)
}

pub fn half_avae(
    g: &mut Graph,
    m: &ModelParams,
    b: &BoundModel,
    x: Var,
    n: &Tensor,
    p: &BatchPlan,
    s: &LossSettings,
) -> Result<LossTerms> {
    half_avae_loss(g, m, b, x, n, p, 1.3, s)
}

pub fn gp_vae(
    g: &mut Graph,
    m: &ModelParams,
    b: &BoundModel,
    x: Var,
    n: &Tensor,
    _: &BatchPlan,
    s: &LossSettings,
) -> Result<LossTerms> {
    gp_avae_loss(g, m, b, x, n, None, 0.0, s)
}

pub fn gp_avae(
    g: &mut Graph,
    m: &ModelParams,
    b: &BoundModel,
    x: Var,
    n: &Tensor,
    p: &BatchPlan,
    s: &LossSettings,
) -> Result<LossTerms> {
    gp_avae_loss(g, m, b, x, n, Some(p), 1.3, s)
}

/// Every composite loss with and without EE, on three seeds.
pub const COMPOSITES: [(&str, ModelVariant, LossFn); 4] = [
    ("half-vae", ModelVariant::HalfGpVae, half_vae),
    ("half-avae", ModelVariant::HalfGpAvae, half_avae),
    ("gp-vae", ModelVariant::GpAvae, gp_vae),
    ("gp-avae", ModelVariant::GpAvae, gp_avae),
];

pub fn settings(ee: bool) -> LossSettings {
    LossSettings {
        obs_var: 0.01,
        ee: ee.then(|| unmix::gp::EeCoefficients::new(1e-3, 0.5, 0.5).unwrap()),
    }
}

/// Largest relative finite-difference error of one composite loss.
pub fn composite_error(variant: ModelVariant, seed: u64, settings: LossSettings, loss: LossFn) -> f64 {
    let (model, x, noise, plan) = toy(variant, seed);
    let report = unmix::autodiff::grad_check(
        |g, vars| {
            let bound = rebind(&model, vars);
            let xv = g.constant(x.clone());
            Ok(loss(g, &model, &bound, xv, &noise, &plan, &settings)?.total)
        },
        &flatten(&model),
        1e-5,
    )
    .unwrap();
    assert!(report.coordinates_checked > 0);
    report.max_rel_error
}

/// Largest relative finite-difference error of the discriminator loss,
/// with respect to its weights and the means feeding the batch.
pub fn discriminator_error(seed: u64) -> f64 {
    let (model, _, _, plan) = toy(ModelVariant::HalfGpAvae, seed);
    let disc = model.discriminator.clone().unwrap();
    let mut inputs: Vec<Tensor> = disc.net.params().into_iter().cloned().collect();
    inputs.push(model.bank.as_ref().unwrap().mu.clone());
    unmix::autodiff::grad_check(
        |g, vars| {
            let (net, mu) = vars.split_at(vars.len() - 1);
            let batch = unmix::objectives::AdversarialBatch::build(g, mu[0], &plan)?;
            unmix::objectives::discriminator_loss(g, &disc, net, batch)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
    .max_rel_error
}
