//! Adam and the alternating training loop.
//!
//! Each epoch runs, for adversarial variants past the warm-up, a number of
//! discriminator steps on batches built from the current (detached)
//! posterior means, followed by one main step on everything except the
//! discriminator.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gp::EeCoefficients;
use crate::models::{Architecture, ModelParams, ModelVariant, Trainable};
use crate::objectives::{discriminator_loss, main_loss, AdversarialBatch, BatchPlan, LossBreakdown, LossSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments are allocated on the first step and shape-checked afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Usage(format!(
            "adam_step got {} parameters and {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::full(p.shape(), 0.0)).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
        return Err(Error::Usage("adam_step parameter set changed between steps".into()));
    }

    state.step += 1;
    let AdamHyper { lr, beta1, beta2, eps } = state.hyper;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn apply_group(group: Vec<(Var, &mut Tensor)>, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let (vars, mut params): (Vec<Var>, Vec<&mut Tensor>) = group.into_iter().unzip();
    let owned: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let refs: Vec<&Tensor> = owned.iter().collect();
    adam_step(&mut params, &refs, state)
}

/// Optimization settings shared by every model in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    /// Latent bank, shared log-variances and length scales.
    pub lr_main: f64,
    /// Decoder and encoder networks.
    pub lr_net: f64,
    pub lr_disc: f64,
    pub lambda: f64,
    pub ee_enabled: bool,
    pub ee: EeCoefficients,
    pub disc_steps_per_main_step: usize,
    pub warmup: usize,
    /// Rows per adversarial batch; `None` uses all `T` time steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversarial_batch: Option<usize>,
    pub obs_var: f64,
    pub architecture: Architecture,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 3000,
            lr_main: 1e-2,
            lr_net: 1e-3,
            lr_disc: 1e-3,
            lambda: 1.0,
            ee_enabled: true,
            ee: EeCoefficients::default(),
            disc_steps_per_main_step: 1,
            warmup: 100,
            adversarial_batch: None,
            obs_var: 0.01,
            architecture: Architecture::default(),
        }
    }
}

impl TrainSettings {
    /// Checks ranges; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        for (name, lr) in [
            ("lr_main", self.lr_main),
            ("lr_net", self.lr_net),
            ("lr_disc", self.lr_disc),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(name, format!("must be positive, got {lr}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", format!("must be non-negative, got {}", self.lambda));
        }
        if !(self.obs_var > 0.0 && self.obs_var.is_finite()) {
            return bad("obs_var", format!("must be positive, got {}", self.obs_var));
        }
        EeCoefficients::new(self.ee.beta1, self.ee.beta2, self.ee.beta3).map_err(|e| e.within("ee"))?;
        if self.disc_steps_per_main_step == 0 {
            return bad("disc_steps_per_main_step", "must be at least 1".into());
        }
        if self.adversarial_batch == Some(0) {
            return bad("adversarial_batch", "must be at least 1".into());
        }
        let arch = &self.architecture;
        if arch.hidden.contains(&0) {
            return bad("architecture.hidden", "widths must be positive".into());
        }
        if arch.encoder_hidden.iter().flatten().any(|&h| h == 0) {
            return bad("architecture.encoder_hidden", "widths must be positive".into());
        }
        let [lo, hi] = arch.init_length_scales;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(
                "architecture.init_length_scales",
                format!("must satisfy 0 < lo <= hi, got [{lo}, {hi}]"),
            );
        }
        if !(arch.prior_jitter > 0.0 && arch.prior_jitter <= crate::gp::MAX_JITTER) {
            return bad(
                "architecture.prior_jitter",
                format!("must be in (0, {}], got {}", crate::gp::MAX_JITTER, arch.prior_jitter),
            );
        }
        if !arch.init_log_var.is_finite() {
            return bad("architecture.init_log_var", "must be finite".into());
        }
        Ok(())
    }
}

/// Everything one training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub seed: u64,
    pub t: usize,
    pub m: usize,
    pub n: usize,
    pub settings: TrainSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: ModelVariant::HalfGpAvae,
            seed: 0,
            t: 200,
            m: 2,
            n: 3,
            settings: TrainSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.settings.validate()?;
        if self.t < 2 || self.m == 0 || self.n == 0 {
            return Err(Error::Usage(format!(
                "invalid sizes t={}, m={}, n={}",
                self.t, self.m, self.n
            )));
        }
        if let Some(b) = self.settings.adversarial_batch {
            if b > self.t {
                return Err(Error::config(
                    "adversarial_batch",
                    format!("must be at most t={}, got {b}", self.t),
                ));
            }
        }
        if !self.variant.has_encoder() && self.settings.architecture.encoder_hidden.is_some() {
            return Err(Error::config(
                "architecture.encoder_hidden",
                format!("{} has no encoder", self.variant),
            ));
        }
        Ok(())
    }

    /// Whether the adversarial term participates at all in this run.
    pub fn adversarial_active(&self) -> bool {
        self.variant.is_adversarial() && self.settings.lambda > 0.0
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            obs_var: self.settings.obs_var,
            ee: self.settings.ee_enabled.then_some(self.settings.ee),
        }
    }
}

/// `(discriminator steps, main steps)` for `epoch`.
pub fn alternate_schedule(epoch: usize, config: &TrainConfig) -> (usize, usize) {
    if config.adversarial_active() && epoch >= config.settings.warmup {
        (config.settings.disc_steps_per_main_step, 1)
    } else {
        (0, 1)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// One entry per epoch, from that epoch's main step.
    pub history: Vec<LossBreakdown>,
}

// Independent ChaCha8 streams per purpose.
const STREAM_INIT: u64 = 10;
const STREAM_NOISE: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Initializes a model exactly as [`train`] does.
pub fn init_model(config: &TrainConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = stream(config.seed, STREAM_INIT);
    ModelParams::init(
        config.variant,
        config.t,
        config.m,
        config.n,
        &config.settings.architecture,
        &mut rng,
    )
}

/// Which half of an epoch just finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Discriminator,
    Main,
}

/// Trains one model on observations `x` (`[m, T]`).
pub fn train(config: &TrainConfig, x: &Tensor) -> Result<TrainOutcome> {
    train_observed(config, x, |_, _, _| {})
}

/// [`train`], calling `observer(epoch, kind, params)` after every
/// optimizer step.
pub fn train_observed<F>(config: &TrainConfig, x: &Tensor, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, StepKind, &ModelParams),
{
    let mut params = init_model(config)?;
    if x.shape() != [config.m, config.t] {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: vec![config.m, config.t],
            right: x.shape().to_vec(),
        });
    }
    if !x.is_finite() {
        return Err(Error::InvalidTensor("observations contain non-finite values".into()));
    }
    let mut trainer = Trainer::new(config);
    let mut history = Vec::with_capacity(config.settings.epochs);
    for epoch in 0..config.settings.epochs {
        let b = trainer.epoch(&mut params, x, epoch, &mut observer)?;
        if epoch % 500 == 0 || epoch + 1 == config.settings.epochs {
            log::debug!(
                "{} epoch {epoch}: total {:.4} recon {:.4} kl {:.4} adv {:.4} ee {:.4}",
                config.variant,
                b.total,
                b.recon,
                b.kl,
                b.adversarial,
                b.ee
            );
        }
        history.push(b);
    }
    Ok(TrainOutcome { params, history })
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    settings: LossSettings,
    batch: usize,
    fast: AdamState,
    slow: AdamState,
    disc: AdamState,
    noise_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    fn new(config: &'a TrainConfig) -> Self {
        Trainer {
            config,
            settings: config.loss_settings(),
            batch: config.settings.adversarial_batch.unwrap_or(config.t),
            fast: AdamState::new(AdamHyper::with_lr(config.settings.lr_main)),
            slow: AdamState::new(AdamHyper::with_lr(config.settings.lr_net)),
            disc: AdamState::new(AdamHyper::with_lr(config.settings.lr_disc)),
            noise_rng: stream(config.seed, STREAM_NOISE),
            shuffle_rng: stream(config.seed, STREAM_SHUFFLE),
        }
    }

    fn epoch<F>(
        &mut self,
        params: &mut ModelParams,
        x: &Tensor,
        epoch: usize,
        observer: &mut F,
    ) -> Result<LossBreakdown>
    where
        F: FnMut(usize, StepKind, &ModelParams),
    {
        let (disc_steps, main_steps) = alternate_schedule(epoch, self.config);
        let adversarial = disc_steps > 0;
        for _ in 0..disc_steps {
            self.discriminator_step(params, x, epoch)?;
            observer(epoch, StepKind::Discriminator, params);
        }
        let mut last = LossBreakdown::default();
        for _ in 0..main_steps {
            last = self.main_step(params, x, epoch, adversarial)?;
            observer(epoch, StepKind::Main, params);
        }
        Ok(last)
    }

    fn discriminator_step(&mut self, params: &mut ModelParams, x: &Tensor, epoch: usize) -> Result<()> {
        let (n, t) = (self.config.n, self.config.t);
        let plan = BatchPlan::draw(n, t, self.batch, &mut self.shuffle_rng)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, Trainable::Discriminator);
        let mu = g.constant(params.inferred_means(x)?);
        let batch = AdversarialBatch::build(&mut g, mu, &plan)?;
        let disc = params
            .discriminator
            .as_ref()
            .expect("adversarial variant has a discriminator");
        let loss = discriminator_loss(&mut g, disc, bound.discriminator.as_ref().unwrap(), batch)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite {
                epoch,
                term: "discriminator",
            });
        }
        let grads = g.backward(loss)?;
        apply_group(params.discriminator_group(&bound), &grads, &mut self.disc)
    }

    fn main_step(
        &mut self,
        params: &mut ModelParams,
        x: &Tensor,
        epoch: usize,
        adversarial: bool,
    ) -> Result<LossBreakdown> {
        let (n, t) = (self.config.n, self.config.t);
        let noise_data = (0..n * t).map(|_| self.noise_rng.sample(StandardNormal)).collect();
        let noise = Tensor::new(vec![n, t], noise_data)?;
        let plan = if adversarial {
            Some(BatchPlan::draw(n, t, self.batch, &mut self.shuffle_rng)?)
        } else {
            None
        };

        let mut g = Graph::new();
        let bound = params.bind(&mut g, Trainable::Main);
        let xv = g.constant(x.clone());
        let terms = main_loss(
            &mut g,
            params,
            &bound,
            xv,
            &noise,
            plan.as_ref(),
            self.config.settings.lambda,
            &self.settings,
        )?;
        let breakdown = terms.breakdown(&g);
        if let Some(term) = breakdown.first_non_finite() {
            return Err(Error::NonFinite { epoch, term });
        }
        let grads = g.backward(terms.total)?;
        let (fast, slow) = params.main_groups(&bound);
        apply_group(fast, &grads, &mut self.fast)?;
        apply_group(slow, &grads, &mut self.slow)?;
        Ok(breakdown)
    }
}

pub const HISTORY_HEADER: &str = "epoch,recon,kl,adv,ee,total";

pub fn history_to_csv(history: &[LossBreakdown]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for (epoch, b) in history.iter().enumerate() {
        writeln!(
            out,
            "{epoch},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            b.recon, b.kl, b.adversarial, b.ee, b.total
        )
        .unwrap();
    }
    out
}

pub fn write_history(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    std::fs::write(path, history_to_csv(history)).map_err(|e| Error::io(path, e))
}
