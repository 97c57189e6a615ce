//! Squared-exponential GP priors, one per latent dimension.
//!
//! Each latent sequence `Z^i` over the time grid has prior `N(0, K_i)` with
//! `K_i(t, t') = exp(-(t - t')^2 / (2 l_i^2))`. The approximate posterior
//! is `N(mu_i, s_i^2 I)`: a free mean sequence with one variance shared by
//! every time step. Their KL divergence has the closed form
//!
//! ```text
//! KL = 1/2 [ s^2 tr(K^-1) + mu^T K^-1 mu - T + ln det K - T ln s^2 ]
//! ```
//!
//! which is evaluated through the Cholesky factor of `K + jitter I`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_into, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Largest jitter tried before a factorization is declared failed.
pub const MAX_JITTER: f64 = 1e-2;
/// Default base jitter for kernel factorizations.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Floor inside the pairwise length-scale repulsion denominator.
pub const EE_FLOOR: f64 = 1e-6;

/// Time locations `0, 1/T, ..., (T-1)/T`.
pub fn time_grid(t: usize) -> Vec<f64> {
    (0..t).map(|i| i as f64 / t as f64).collect()
}

/// `T x T` SE covariance with unit amplitude.
pub fn se_kernel_matrix(grid: &[f64], length_scale: f64) -> Result<Tensor> {
    if grid.is_empty() {
        return Err(Error::Usage("empty time grid".into()));
    }
    if !(length_scale > 0.0) || !length_scale.is_finite() {
        return Err(Error::NonPositive {
            what: "length scale",
            value: length_scale,
        });
    }
    let t = grid.len();
    let inv = 1.0 / (2.0 * length_scale * length_scale);
    let mut k = vec![0.0; t * t];
    for i in 0..t {
        k[i * t + i] = 1.0;
        for j in 0..i {
            let d = grid[i] - grid[j];
            let v = (-d * d * inv).exp();
            k[i * t + j] = v;
            k[j * t + i] = v;
        }
    }
    Tensor::new(vec![t, t], k)
}

/// Lower Cholesky factor of `K + jitter I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub lower: Tensor,
    pub jitter: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.shape()[0]
    }

    /// `ln det(K + jitter I)`.
    pub fn log_det(&self) -> f64 {
        let t = self.dim();
        let l = self.lower.data();
        2.0 * (0..t).map(|i| l[i * t + i].ln()).sum::<f64>()
    }

    /// Dense inverse of the lower factor, row-major.
    fn inverse_lower(&self) -> Vec<f64> {
        invert_lower(self.lower.data(), self.dim())
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let t = self.dim();
        let l = self.lower.data();
        let mut y = vec![0.0; t];
        for i in 0..t {
            let row = &l[i * t..i * t + i];
            let s: f64 = row.iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
            y[i] = (b[i] - s) / l[i * t + i];
        }
        y
    }
}

fn try_cholesky(a: &[f64], t: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..=i {
            let (ri, rj) = (i * t, j * t);
            let dot: f64 = l[ri..ri + j].iter().zip(&l[rj..rj + j]).map(|(x, y)| x * y).sum();
            if i == j {
                let d = a[ri + i] + jitter - dot;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l[ri + i] = d.sqrt();
            } else {
                l[ri + j] = (a[ri + j] - dot) / l[rj + j];
            }
        }
    }
    Some(l)
}

fn invert_lower(l: &[f64], t: usize) -> Vec<f64> {
    // Row i of L^-1 is (e_i - sum_{k<i} L[i][k] row_k) / L[i][i]; row_k is
    // zero beyond column k, so every update touches a contiguous prefix.
    let mut x = vec![0.0; t * t];
    let mut acc = vec![0.0; t];
    for i in 0..t {
        acc[..=i].fill(0.0);
        for k in 0..i {
            let lik = l[i * t + k];
            if lik == 0.0 {
                continue;
            }
            let row_k = &x[k * t..k * t + k + 1];
            for (a, &xv) in acc[..=k].iter_mut().zip(row_k) {
                *a -= lik * xv;
            }
        }
        acc[i] += 1.0;
        let d = l[i * t + i];
        for (dst, &a) in x[i * t..i * t + i + 1].iter_mut().zip(&acc[..=i]) {
            *dst = a / d;
        }
    }
    x
}

/// Factorizes `K + j I`, escalating `j` tenfold from `base_jitter` until it
/// succeeds or exceeds [`MAX_JITTER`].
pub fn cholesky_with_jitter(k: &Tensor, base_jitter: f64) -> Result<CholeskyFactor> {
    let t = match k.dims2() {
        Some((r, c)) if r == c => r,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "cholesky",
                left: k.shape().to_vec(),
                right: vec![],
            })
        }
    };
    if !(base_jitter > 0.0) {
        return Err(Error::NonPositive {
            what: "jitter",
            value: base_jitter,
        });
    }
    let a = k.data();
    for i in 0..t {
        for j in 0..i {
            if (a[i * t + j] - a[j * t + i]).abs() > 1e-12 {
                return Err(Error::Domain {
                    op: "cholesky",
                    detail: format!("matrix not symmetric at ({i}, {j})"),
                });
            }
        }
    }
    let mut jitter = base_jitter;
    loop {
        if let Some(l) = try_cholesky(a, t, jitter) {
            return Ok(CholeskyFactor {
                lower: Tensor::new(vec![t, t], l)?,
                jitter,
            });
        }
        let next = jitter * 10.0;
        if next > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::FactorizationFailed { jitter });
        }
        jitter = next;
    }
}

/// KL(N(mu, var I) || N(0, K)) where `prior` factors `K` (including jitter).
pub fn kl_gaussian_vs_gp(mu: &[f64], shared_var: f64, prior: &CholeskyFactor) -> Result<f64> {
    let t = prior.dim();
    if mu.len() != t {
        return Err(Error::ShapeMismatch {
            op: "kl_gaussian_vs_gp",
            left: vec![mu.len()],
            right: vec![t],
        });
    }
    if !(shared_var > 0.0) {
        return Err(Error::NonPositive {
            what: "posterior variance",
            value: shared_var,
        });
    }
    let linv = prior.inverse_lower();
    let trace_kinv: f64 = linv.iter().map(|x| x * x).sum();
    let white = prior.solve_lower(mu);
    let quad: f64 = white.iter().map(|x| x * x).sum();
    let tf = t as f64;
    Ok(0.5 * (shared_var * trace_kinv + quad - tf + prior.log_det() - tf * shared_var.ln()))
}

pub(crate) struct KlGrads {
    pub d_mu: Vec<f64>,
    pub d_var: f64,
    pub d_length_scale: f64,
}

pub(crate) struct KlEval {
    pub value: f64,
    pub grads: Option<KlGrads>,
}

/// KL value and, optionally, its gradient with respect to the mean sequence,
/// the shared variance and the kernel length scale. The jitter chosen by the
/// factorization is treated as a constant.
pub(crate) fn kl_eval(
    grid: &[f64],
    mu: &[f64],
    var: f64,
    length_scale: f64,
    base_jitter: f64,
    want_grads: bool,
) -> Result<KlEval> {
    let k = se_kernel_matrix(grid, length_scale)?;
    let factor = cholesky_with_jitter(&k, base_jitter)?;
    if !want_grads {
        return Ok(KlEval {
            value: kl_gaussian_vs_gp(mu, var, &factor)?,
            grads: None,
        });
    }
    if !(var > 0.0) {
        return Err(Error::NonPositive {
            what: "posterior variance",
            value: var,
        });
    }
    let t = grid.len();
    let tf = t as f64;
    let linv = factor.inverse_lower();
    let trace_kinv: f64 = linv.iter().map(|x| x * x).sum();

    // K^-1 = L^-T L^-1
    let linv_t = Tensor::new(vec![t, t], linv.clone())?.transpose();
    let mut kinv = vec![0.0; t * t];
    matmul_into(linv_t.data(), &linv, &mut kinv, t, t, t);

    let alpha: Vec<f64> = (0..t)
        .map(|i| kinv[i * t..(i + 1) * t].iter().zip(mu).map(|(a, b)| a * b).sum())
        .collect();
    let quad: f64 = alpha.iter().zip(mu).map(|(a, b)| a * b).sum();
    let value = 0.5 * (var * trace_kinv + quad - tf + factor.log_det() - tf * var.ln());

    // dKL/dK = 1/2 (K^-1 - var K^-2 - alpha alpha^T), and
    // dK_ab/dl = K_ab (t_a - t_b)^2 / l^3 for the noise-free kernel.
    let kd = k.data();
    let l3 = length_scale.powi(3);
    let mut w = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            let d = grid[i] - grid[j];
            w[i * t + j] = kd[i * t + j] * d * d / l3;
        }
    }
    let mut kinv_w = vec![0.0; t * t];
    matmul_into(&kinv, &w, &mut kinv_w, t, t, t);
    let mut d_len = 0.0;
    for i in 0..t {
        for j in 0..t {
            let idx = i * t + j;
            let g = kinv[idx] - alpha[i] * alpha[j];
            d_len += g * w[idx] - var * kinv[idx] * kinv_w[idx];
        }
    }
    d_len *= 0.5;

    Ok(KlEval {
        value,
        grads: Some(KlGrads {
            d_mu: alpha,
            d_var: 0.5 * (trace_kinv - tf / var),
            d_length_scale: d_len,
        }),
    })
}

/// Weights of the external-enhancement penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EeCoefficients {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl EeCoefficients {
    pub fn new(beta1: f64, beta2: f64, beta3: f64) -> Result<Self> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2), ("beta3", beta3)] {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::config(name, format!("must be non-negative, got {b}")));
            }
        }
        Ok(EeCoefficients { beta1, beta2, beta3 })
    }
}

impl Default for EeCoefficients {
    fn default() -> Self {
        EeCoefficients {
            beta1: 1e-2,
            beta2: 10.0,
            beta3: 10.0,
        }
    }
}

/// `beta1 sum_{i<j} 1/((l_i - l_j)^2 + floor) + beta2 sum l_i + beta3 sum s_i^2`.
pub fn ee_penalty(length_scales: &[f64], shared_vars: &[f64], coeffs: &EeCoefficients, floor: f64) -> f64 {
    let mut repulsion = 0.0;
    for i in 0..length_scales.len() {
        for j in i + 1..length_scales.len() {
            let d = length_scales[i] - length_scales[j];
            repulsion += 1.0 / (d * d + floor);
        }
    }
    coeffs.beta1 * repulsion
        + coeffs.beta2 * length_scales.iter().sum::<f64>()
        + coeffs.beta3 * shared_vars.iter().sum::<f64>()
}

/// Graph version of [`ee_penalty`]; `length_scales` and `shared_vars` are
/// vectors of length n.
pub fn ee_penalty_graph(
    g: &mut Graph,
    length_scales: Var,
    shared_vars: Var,
    coeffs: &EeCoefficients,
    floor: f64,
) -> Result<Var> {
    let n = g.value(length_scales).numel();
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            left.push(i);
            right.push(j);
        }
    }
    let spread = g.sum(length_scales)?;
    let spread = g.scale(spread, coeffs.beta2)?;
    let vars = g.sum(shared_vars)?;
    let vars = g.scale(vars, coeffs.beta3)?;
    let mut total = g.add(spread, vars)?;
    if !left.is_empty() {
        let pairs = left.len();
        let a = g.gather(length_scales, vec![pairs], left)?;
        let b = g.gather(length_scales, vec![pairs], right)?;
        let d = g.sub(a, b)?;
        let d2 = g.square(d)?;
        let den = g.shift(d2, floor)?;
        let one = g.scalar(1.0);
        let inv = g.div(one, den)?;
        let rep = g.sum(inv)?;
        let rep = g.scale(rep, coeffs.beta1)?;
        total = g.add(rep, total)?;
    }
    Ok(total)
}

/// Trainable SE priors, one per latent dimension, over a shared time grid.
///
/// Length scales are stored in log space so they stay positive under any
/// gradient step.
#[derive(Debug, Clone)]
pub struct GpPriorSet {
    grid: Vec<f64>,
    log_length_scales: Tensor,
    jitter: f64,
    cache: Vec<Option<CholeskyFactor>>,
}

impl GpPriorSet {
    pub fn new(t: usize, length_scales: &[f64], jitter: f64) -> Result<Self> {
        if t == 0 || length_scales.is_empty() {
            return Err(Error::Usage("prior set needs T >= 1 and n >= 1".into()));
        }
        if let Some(&bad) = length_scales.iter().find(|&&l| !(l > 0.0)) {
            return Err(Error::NonPositive {
                what: "length scale",
                value: bad,
            });
        }
        if !(jitter > 0.0) {
            return Err(Error::NonPositive {
                what: "jitter",
                value: jitter,
            });
        }
        Ok(GpPriorSet {
            grid: time_grid(t),
            log_length_scales: Tensor::vector(length_scales.iter().map(|l| l.ln()).collect()),
            jitter,
            cache: vec![None; length_scales.len()],
        })
    }

    /// `n` length scales spaced geometrically over `[lo, hi]`.
    pub fn geometric(t: usize, n: usize, lo: f64, hi: f64, jitter: f64) -> Result<Self> {
        let scales: Vec<f64> = if n == 1 {
            vec![(lo * hi).sqrt()]
        } else {
            let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
            (0..n).map(|i| lo * ratio.powi(i as i32)).collect()
        };
        GpPriorSet::new(t, &scales, jitter)
    }

    pub fn dims(&self) -> usize {
        self.log_length_scales.numel()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn length_scales(&self) -> Vec<f64> {
        self.log_length_scales.data().iter().map(|x| x.exp()).collect()
    }

    pub fn log_length_scales(&self) -> &Tensor {
        &self.log_length_scales
    }

    /// Mutable access for optimizers; invalidates cached factors.
    pub fn log_length_scales_mut(&mut self) -> &mut Tensor {
        self.cache.iter_mut().for_each(|c| *c = None);
        &mut self.log_length_scales
    }

    /// Cached factor of `K_i + jitter I`.
    pub fn factor(&mut self, i: usize) -> Result<&CholeskyFactor> {
        if self.cache[i].is_none() {
            let ls = self.log_length_scales.data()[i].exp();
            let k = se_kernel_matrix(&self.grid, ls)?;
            self.cache[i] = Some(cholesky_with_jitter(&k, self.jitter)?);
        }
        Ok(self.cache[i].as_ref().expect("just filled"))
    }

    /// KL of dimension `i` against its prior, without building a graph.
    pub fn kl(&mut self, i: usize, mu: &[f64], shared_var: f64) -> Result<f64> {
        let factor = self.factor(i)?;
        kl_gaussian_vs_gp(mu, shared_var, factor)
    }
}
