//! Parameter containers and forward passes.
//!
//! * decoder `Psi`: an MLP applied per time step, latent `R^n` to observed `R^m`;
//! * encoder `Theta` (GP-AVAE only): per-step MLP `R^m -> R^n` for the means,
//!   plus one free log-variance per latent dimension;
//! * latent bank `Omega` (Half variants): the posterior means and shared
//!   log-variances themselves, trained directly;
//! * discriminator `Phi`: MLP `R^n -> (0, 1)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gp::GpPriorSet;

/// Probability clamp applied to discriminator outputs.
pub const DISC_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "gp-avae")]
    GpAvae,
    #[serde(rename = "half-gp-vae")]
    HalfGpVae,
    #[serde(rename = "half-gp-avae")]
    HalfGpAvae,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::GpAvae, ModelVariant::HalfGpVae, ModelVariant::HalfGpAvae];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::GpAvae => "gp-avae",
            ModelVariant::HalfGpVae => "half-gp-vae",
            ModelVariant::HalfGpAvae => "half-gp-avae",
        }
    }

    pub fn has_encoder(self) -> bool {
        self == ModelVariant::GpAvae
    }

    pub fn is_adversarial(self) -> bool {
        self != ModelVariant::HalfGpVae
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown model variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[d_in, d_out]`
    pub weight: Tensor,
    /// `[d_out]`
    pub bias: Tensor,
}

/// Fully connected network with tanh hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    output: OutputActivation,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], output: OutputActivation, rng: &mut R) -> Result<Self> {
        Self::build(dims, output, |d_in, d_out| {
            let a = (6.0 / (d_in + d_out) as f64).sqrt();
            (0..d_in * d_out).map(|_| rng.random_range(-a..a)).collect()
        })
    }

    pub fn zeros(dims: &[usize], output: OutputActivation) -> Result<Self> {
        Self::build(dims, output, |d_in, d_out| vec![0.0; d_in * d_out])
    }

    fn build(dims: &[usize], output: OutputActivation, mut init: impl FnMut(usize, usize) -> Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Usage(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                Ok(Dense {
                    weight: Tensor::new(vec![w[0], w[1]], init(w[0], w[1]))?,
                    bias: Tensor::zeros(&[w[1]]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, output })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape()[1]
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_width()];
        dims.extend(self.layers.iter().map(|l| l.weight.shape()[1]));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// Weights and biases in layer order: `[w0, b0, w1, b1, ...]`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    /// `input` is `[batch, d_in]`; `vars` come from [`Mlp::bind`].
    pub fn forward(&self, g: &mut Graph, vars: &[Var], input: Var) -> Result<Var> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_width() {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                left: shape,
                right: vec![self.input_width()],
            });
        }
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, pair) in vars.chunks(2).enumerate() {
            let pre = g.matmul(h, pair[0])?;
            let pre = g.add_row(pre, pair[1])?;
            h = if i < last {
                g.tanh(pre)?
            } else {
                match self.output {
                    OutputActivation::Identity => pre,
                    OutputActivation::Sigmoid => g.sigmoid(pre)?,
                }
            };
        }
        Ok(h)
    }

    /// Forward pass on plain values.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}

/// Encoder-free posterior: per-dimension mean sequences and one shared
/// log-variance per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBank {
    /// `[n, T]`
    pub mu: Tensor,
    /// `[n]`
    pub log_var: Tensor,
}

impl LatentBank {
    pub fn new(n: usize, t: usize, init_log_var: f64) -> Self {
        LatentBank {
            mu: Tensor::zeros(&[n, t]),
            log_var: Tensor::full(&[n], init_log_var),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mu.dims2().expect("bank mu is a matrix")
    }

    /// One variance per dimension; every time step of dimension `i` shares it.
    pub fn variances(&self) -> Vec<f64> {
        self.log_var.data().iter().map(|x| x.exp()).collect()
    }
}

/// Reparameterized draw `Z[i, t] = mu[i, t] + exp(log_var[i] / 2) * noise[i, t]`.
pub fn latent_sample(g: &mut Graph, mu: Var, log_var: Var, noise: &Tensor) -> Result<Var> {
    let shape = g.value(mu).shape().to_vec();
    let (n, t) = g.value(mu).dims2().ok_or_else(|| Error::ShapeMismatch {
        op: "latent_sample",
        left: shape.clone(),
        right: vec![],
    })?;
    if noise.shape() != shape.as_slice() || g.value(log_var).numel() != n {
        return Err(Error::ShapeMismatch {
            op: "latent_sample",
            left: shape,
            right: noise.shape().to_vec(),
        });
    }
    let half = g.scale(log_var, 0.5)?;
    let std = g.exp(half)?;
    let spread = g.gather(std, vec![n, t], (0..n * t).map(|k| k / t).collect())?;
    let eps = g.constant(noise.clone());
    let jitter = g.mul(spread, eps)?;
    g.add(mu, jitter)
}

/// Mean head plus free shared log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub mean_head: Mlp,
    /// `[n]`
    pub log_var: Tensor,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(m: usize, n: usize, hidden: &[usize], init_log_var: f64, rng: &mut R) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(m).chain(hidden.iter().copied()).chain([n]).collect();
        Ok(Encoder {
            mean_head: Mlp::new(&dims, OutputActivation::Identity, rng)?,
            log_var: Tensor::full(&[n], init_log_var),
        })
    }

    /// `x` is `[m, T]`; returns the `[n, T]` mean sequences. `vars` are the
    /// mean-head parameters from [`Mlp::bind`].
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let xt = g.transpose(x)?;
        let mu_t = self.mean_head.forward(g, vars, xt)?;
        g.transpose(mu_t)
    }

    /// Mean sequences as plain values.
    pub fn means(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.mean_head.eval(&x.transpose())?.transpose())
    }
}

/// Binary classifier separating shuffled (marginal) rows from aligned
/// (joint) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: Mlp,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(n: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(n).chain(hidden.iter().copied()).chain([1]).collect();
        Ok(Discriminator {
            net: Mlp::new(&dims, OutputActivation::Sigmoid, rng)?,
        })
    }

    /// `[batch, n]` rows to `[batch, 1]` probabilities in `[DISC_CLAMP, 1 - DISC_CLAMP]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], rows: Var) -> Result<Var> {
        let p = self.net.forward(g, vars, rows)?;
        g.clamp(p, DISC_CLAMP, 1.0 - DISC_CLAMP)
    }

    pub fn eval(&self, rows: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.net.bind(&mut g, false);
        let x = g.constant(rows.clone());
        let p = self.forward(&mut g, &vars, x)?;
        Ok(g.value(p).clone())
    }
}

/// Architecture and initialization choices shared by all variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub init_log_var: f64,
    /// Initial length scales are spaced geometrically over this range.
    pub init_length_scales: [f64; 2],
    pub prior_jitter: f64,
    /// Encoder hidden widths (GP-AVAE only); defaults to `hidden`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_hidden: Option<Vec<usize>>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: vec![32, 32],
            init_log_var: 1e-3f64.ln(),
            init_length_scales: [0.02, 0.2],
            prior_jitter: 1e-3,
            encoder_hidden: None,
        }
    }
}

/// Bound leaves paired with the parameters they were bound from.
pub type ParamGroup<'a> = Vec<(Var, &'a mut Tensor)>;

/// Everything one training run optimizes.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub variant: ModelVariant,
    pub decoder: Mlp,
    pub encoder: Option<Encoder>,
    pub bank: Option<LatentBank>,
    pub discriminator: Option<Discriminator>,
    pub priors: GpPriorSet,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        variant: ModelVariant,
        t: usize,
        m: usize,
        n: usize,
        arch: &Architecture,
        rng: &mut R,
    ) -> Result<Self> {
        let [lo, hi] = arch.init_length_scales;
        let priors = GpPriorSet::geometric(t, n, lo, hi, arch.prior_jitter)?;
        let dec_dims: Vec<usize> = std::iter::once(n)
            .chain(arch.hidden.iter().copied())
            .chain([m])
            .collect();
        let decoder = Mlp::new(&dec_dims, OutputActivation::Identity, rng)?;
        let encoder = if variant.has_encoder() {
            let hidden = arch.encoder_hidden.as_ref().unwrap_or(&arch.hidden);
            Some(Encoder::new(m, n, hidden, arch.init_log_var, rng)?)
        } else {
            None
        };
        let bank = (!variant.has_encoder()).then(|| LatentBank::new(n, t, arch.init_log_var));
        let discriminator = if variant.is_adversarial() {
            Some(Discriminator::new(n, &arch.hidden, rng)?)
        } else {
            None
        };
        Ok(ModelParams {
            variant,
            decoder,
            encoder,
            bank,
            discriminator,
            priors,
        })
    }

    pub fn latent_dims(&self) -> usize {
        self.priors.dims()
    }

    /// Posterior mean sequences `[n, T]` for observations `x` (`[m, T]`).
    pub fn inferred_means(&self, x: &Tensor) -> Result<Tensor> {
        match (&self.bank, &self.encoder) {
            (Some(bank), _) => Ok(bank.mu.clone()),
            (None, Some(enc)) => enc.means(x),
            (None, None) => Err(Error::Usage("model has neither latent bank nor encoder".into())),
        }
    }

    /// Shared posterior variances, one per latent dimension.
    pub fn posterior_variances(&self) -> Vec<f64> {
        let lv = match (&self.bank, &self.encoder) {
            (Some(b), _) => &b.log_var,
            (None, Some(e)) => &e.log_var,
            (None, None) => return Vec::new(),
        };
        lv.data().iter().map(|x| x.exp()).collect()
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        fn mlp<'a>(prefix: &str, net: &'a Mlp, out: &mut Vec<(String, &'a Tensor)>) {
            for (i, l) in net.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        mlp("decoder", &self.decoder, &mut out);
        if let Some(e) = &self.encoder {
            mlp("encoder", &e.mean_head, &mut out);
            out.push(("encoder.log_var".into(), &e.log_var));
        }
        if let Some(b) = &self.bank {
            out.push(("bank.mu".into(), &b.mu));
            out.push(("bank.log_var".into(), &b.log_var));
        }
        if let Some(d) = &self.discriminator {
            mlp("discriminator", &d.net, &mut out);
        }
        out.push(("prior.log_length_scale".into(), self.priors.log_length_scales()));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        fn mlp<'a>(prefix: &str, net: &'a mut Mlp, out: &mut Vec<(String, &'a mut Tensor)>) {
            for (i, l) in net.layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
                out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
            }
        }
        mlp("decoder", &mut self.decoder, &mut out);
        if let Some(e) = &mut self.encoder {
            mlp("encoder", &mut e.mean_head, &mut out);
            out.push(("encoder.log_var".into(), &mut e.log_var));
        }
        if let Some(b) = &mut self.bank {
            out.push(("bank.mu".into(), &mut b.mu));
            out.push(("bank.log_var".into(), &mut b.log_var));
        }
        if let Some(d) = &mut self.discriminator {
            mlp("discriminator", &mut d.net, &mut out);
        }
        out.push(("prior.log_length_scale".into(), self.priors.log_length_scales_mut()));
        out
    }

    pub fn to_checkpoint(&self, arch: &Architecture) -> Checkpoint {
        let (t, m, n) = (
            self.priors.grid().len(),
            self.decoder.output_width(),
            self.latent_dims(),
        );
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            variant: self.variant,
            t,
            m,
            n,
            architecture: arch.clone(),
            params: self
                .named()
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Usage(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        // Shapes come from the architecture; values are then overwritten.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = ModelParams::init(ckpt.variant, ckpt.t, ckpt.m, ckpt.n, &ckpt.architecture, &mut rng)?;
        let mut slots = model.named_mut();
        if slots.len() != ckpt.params.len() {
            return Err(Error::Usage(format!(
                "checkpoint has {} arrays, model expects {}",
                ckpt.params.len(),
                slots.len()
            )));
        }
        for ((name, slot), arr) in slots.iter_mut().zip(&ckpt.params) {
            if *name != arr.name || slot.shape() != arr.shape.as_slice() {
                return Err(Error::Usage(format!(
                    "checkpoint array `{}` {:?} does not match `{}` {:?}",
                    arr.name,
                    arr.shape,
                    name,
                    slot.shape()
                )));
            }
            **slot = Tensor::new(arr.shape.clone(), arr.values.clone())?;
        }
        drop(slots);
        Ok(model)
    }
}

/// Which parameter groups become trainable leaves when binding a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Everything except the discriminator (posterior, decoder, priors).
    Main,
    /// Only the discriminator.
    Discriminator,
    /// Nothing; evaluation only.
    None,
}

/// A model's parameters recorded as leaves of one graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub decoder: Vec<Var>,
    /// Mean-head parameters and the shared log-variances.
    pub encoder: Option<(Vec<Var>, Var)>,
    /// Means `[n, T]` and shared log-variances `[n]`.
    pub bank: Option<(Var, Var)>,
    pub discriminator: Option<Vec<Var>>,
    /// `[n]`
    pub log_length_scales: Var,
}

impl ModelParams {
    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> BoundModel {
        let main = trainable == Trainable::Main;
        let disc = trainable == Trainable::Discriminator;
        BoundModel {
            decoder: self.decoder.bind(g, main),
            encoder: self
                .encoder
                .as_ref()
                .map(|e| (e.mean_head.bind(g, main), g.leaf(e.log_var.clone(), main))),
            bank: self
                .bank
                .as_ref()
                .map(|b| (g.leaf(b.mu.clone(), main), g.leaf(b.log_var.clone(), main))),
            discriminator: self.discriminator.as_ref().map(|d| d.net.bind(g, disc)),
            log_length_scales: g.leaf(self.priors.log_length_scales().clone(), main),
        }
    }

    /// Parameters updated by the main step, paired with their bound leaves,
    /// split into the fast group (posterior bank, length scales) and the slow
    /// group (decoder, encoder).
    pub fn main_groups<'a>(&'a mut self, bound: &BoundModel) -> (ParamGroup<'a>, ParamGroup<'a>) {
        let mut fast = Vec::new();
        let mut slow: Vec<(Var, &mut Tensor)> = self
            .decoder
            .params_mut()
            .into_iter()
            .zip(&bound.decoder)
            .map(|(t, v)| (*v, t))
            .collect();
        if let (Some(enc), Some((vars, lv))) = (self.encoder.as_mut(), bound.encoder.as_ref()) {
            slow.extend(enc.mean_head.params_mut().into_iter().zip(vars).map(|(t, v)| (*v, t)));
            fast.push((*lv, &mut enc.log_var));
        }
        if let (Some(bank), Some((mu, lv))) = (self.bank.as_mut(), bound.bank.as_ref()) {
            fast.push((*mu, &mut bank.mu));
            fast.push((*lv, &mut bank.log_var));
        }
        fast.push((bound.log_length_scales, self.priors.log_length_scales_mut()));
        (fast, slow)
    }

    /// Discriminator parameters paired with their bound leaves.
    pub fn discriminator_group<'a>(&'a mut self, bound: &BoundModel) -> ParamGroup<'a> {
        match (self.discriminator.as_mut(), bound.discriminator.as_ref()) {
            (Some(d), Some(vars)) => d.net.params_mut().into_iter().zip(vars).map(|(t, v)| (*v, t)).collect(),
            _ => Vec::new(),
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "unmix-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON checkpoint: named row-major arrays plus enough metadata to rebuild
/// the containers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub variant: ModelVariant,
    pub t: usize,
    pub m: usize,
    pub n: usize,
    pub architecture: Architecture,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
