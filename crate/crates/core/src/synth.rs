//! Synthetic sources, mixing maps and signal files.
//!
//! Three sources with clearly separated autocorrelation scales are drawn
//! over `T` steps: a slow chirp-like sinusoid, a smooth GP sample and a fast
//! sinusoid. Everything random is driven by ChaCha8 seeded from the
//! experiment seed, so the same seed yields the same signals on every
//! platform.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gp::{cholesky_with_jitter, se_kernel_matrix, time_grid};

/// Minimum sequence length accepted by [`generate_sources`].
pub const MIN_LENGTH: usize = 50;

/// Waveform parameters of the three sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSpec {
    /// Cycles of the slow sinusoid over the whole sequence.
    pub slow_cycles: f64,
    /// Relative frequency increase of the slow sinusoid from start to end.
    pub slow_drift: f64,
    /// SE length scale (normalized time) of the smooth GP source.
    pub gp_length_scale: f64,
    /// Cycles of the fast sinusoid over the whole sequence.
    pub fast_cycles: f64,
    /// Redraw when any pairwise |correlation| reaches this value.
    pub max_abs_correlation: f64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            slow_cycles: 1.5,
            slow_drift: 0.3,
            gp_length_scale: 0.05,
            fast_cycles: 8.0,
            max_abs_correlation: 0.2,
        }
    }
}

/// Ground-truth sources, `[3, T]`, each z-scored.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    pub sources: Tensor,
    pub seed: u64,
    pub spec: SourceSpec,
    /// Number of draws needed to satisfy the correlation bound.
    pub draws: u32,
}

const MAX_DRAWS: u32 = 1000;

/// Draws the three sources for `seed`, redrawing (deterministically) until
/// every pairwise correlation is below `spec.max_abs_correlation`.
pub fn generate_sources(t: usize, seed: u64, spec: &SourceSpec) -> Result<SourceSet> {
    if t < MIN_LENGTH {
        return Err(Error::Usage(format!("source length {t} below minimum {MIN_LENGTH}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    for draw in 1..=MAX_DRAWS {
        let rows = draw_once(t, spec, &mut rng)?;
        let worst = max_abs_pairwise_correlation(&rows);
        if worst < spec.max_abs_correlation {
            let data = rows.into_iter().flatten().collect();
            return Ok(SourceSet {
                sources: Tensor::new(vec![3, t], data)?,
                seed,
                spec: spec.clone(),
                draws: draw,
            });
        }
    }
    Err(Error::Degenerate(format!(
        "no source draw within correlation bound {} after {MAX_DRAWS} attempts",
        spec.max_abs_correlation
    )))
}

fn draw_once(t: usize, spec: &SourceSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    use std::f64::consts::TAU;
    let grid = time_grid(t);

    let phase_slow = rng.random_range(0.0..TAU);
    let slow: Vec<f64> = grid
        .iter()
        .map(|&u| {
            let cycles = spec.slow_cycles * (u + 0.5 * spec.slow_drift * u * u);
            (TAU * cycles + phase_slow).sin()
        })
        .collect();

    let k = se_kernel_matrix(&grid, spec.gp_length_scale)?;
    let factor = cholesky_with_jitter(&k, 1e-8)?;
    let eps: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
    let l = factor.lower.data();
    let smooth: Vec<f64> = (0..t)
        .map(|i| l[i * t..i * t + i + 1].iter().zip(&eps).map(|(a, b)| a * b).sum())
        .collect();

    let phase_fast = rng.random_range(0.0..TAU);
    let fast: Vec<f64> = grid
        .iter()
        .map(|&u| (TAU * spec.fast_cycles * u + phase_fast).sin())
        .collect();

    [slow, smooth, fast].iter().map(|s| zscore(s)).collect()
}

/// Population-standardized copy of `seq`.
pub fn zscore(seq: &[f64]) -> Result<Vec<f64>> {
    if seq.is_empty() {
        return Err(Error::Degenerate("empty sequence".into()));
    }
    let n = seq.len() as f64;
    let mean = seq.iter().sum::<f64>() / n;
    let var = seq.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !std.is_finite() || std <= 1e-12 * (1.0 + mean.abs()) {
        return Err(Error::Degenerate(format!("sequence has no variance (std {std:e})")));
    }
    Ok(seq.iter().map(|x| (x - mean) / std).collect())
}

/// Z-scores every row of a `[k, T]` tensor.
pub fn zscore_rows(x: &Tensor) -> Result<Tensor> {
    let (k, t) = x
        .dims2()
        .ok_or_else(|| Error::Usage("zscore_rows needs a matrix".into()))?;
    let mut out = Vec::with_capacity(k * t);
    for i in 0..k {
        out.extend(zscore(x.row(i))?);
    }
    Tensor::new(vec![k, t], out)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

pub fn lag1_autocorrelation(seq: &[f64]) -> f64 {
    pearson(&seq[..seq.len() - 1], &seq[1..])
}

fn max_abs_pairwise_correlation(rows: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            worst = worst.max(pearson(&rows[i], &rows[j]).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixingMode {
    Linear,
    Nonlinear,
}

/// `X_t = W Z_t` or `X_t = tanh(W Z_t)` with `W` of shape `[m, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingSpec {
    pub mode: MixingMode,
    pub weights: Tensor,
}

impl MixingSpec {
    pub fn new(mode: MixingMode, weights: Tensor) -> Result<Self> {
        if weights.dims2().is_none() || !weights.is_finite() {
            return Err(Error::Usage("mixing weights must be a finite matrix".into()));
        }
        Ok(MixingSpec { mode, weights })
    }

    pub fn observed(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Random `[m, n]` weights with unit-norm rows scaled by `gain` and a
    /// condition number below `max_condition`.
    pub fn random(m: usize, n: usize, mode: MixingMode, gain: f64, max_condition: f64, seed: u64) -> Result<Self> {
        if m == 0 || m > n {
            return Err(Error::Usage(format!("mixing needs 1 <= m <= n, got m={m}, n={n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        for _ in 0..MAX_DRAWS {
            let mut w: Vec<f64> = (0..m * n).map(|_| rng.sample(StandardNormal)).collect();
            for row in w.chunks_mut(n) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().for_each(|x| *x *= gain / norm);
            }
            let weights = Tensor::new(vec![m, n], w)?;
            if condition_number(&weights) < max_condition {
                return MixingSpec::new(mode, weights);
            }
        }
        Err(Error::Degenerate(
            "could not draw a well-conditioned mixing matrix".into(),
        ))
    }
}

/// Ratio of largest to smallest singular value of a wide or square matrix.
pub fn condition_number(w: &Tensor) -> f64 {
    let (m, n) = w.dims2().expect("matrix");
    // Singular values are square roots of the eigenvalues of W W^T (m x m).
    let mut a = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            a[i * m + j] = (0..n).map(|k| w.at(i, k) * w.at(j, k)).sum();
        }
    }
    let eig = symmetric_eigenvalues(&mut a, m);
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        (max / min).sqrt()
    }
}

/// Cyclic Jacobi rotations; fine for the tiny matrices used here.
fn symmetric_eigenvalues(a: &mut [f64], m: usize) -> Vec<f64> {
    for _sweep in 0..100 {
        let off: f64 = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * m + j].powi(2))
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..m {
            for q in p + 1..m {
                let apq = a[p * m + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..m {
                    let (akp, akq) = (a[k * m + p], a[k * m + q]);
                    a[k * m + p] = c * akp - s * akq;
                    a[k * m + q] = s * akp + c * akq;
                }
                for k in 0..m {
                    let (apk, aqk) = (a[p * m + k], a[q * m + k]);
                    a[p * m + k] = c * apk - s * aqk;
                    a[q * m + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..m).map(|i| a[i * m + i]).collect()
}

/// Applies the mixing map per time step to `[n, T]` sources.
pub fn mix(sources: &Tensor, spec: &MixingSpec) -> Result<Tensor> {
    let (n, t) = sources
        .dims2()
        .ok_or_else(|| Error::Usage("sources must be a matrix".into()))?;
    let (m, wn) = spec.weights.dims2().expect("weights are a matrix");
    if wn != n {
        return Err(Error::ShapeMismatch {
            op: "mix",
            left: spec.weights.shape().to_vec(),
            right: sources.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * t];
    for i in 0..m {
        for tau in 0..t {
            let v: f64 = (0..n).map(|k| spec.weights.at(i, k) * sources.at(k, tau)).sum();
            out[i * t + tau] = match spec.mode {
                MixingMode::Linear => v,
                MixingMode::Nonlinear => v.tanh(),
            };
        }
    }
    Tensor::new(vec![m, t], out)
}

/// Writes `[k, T]` signals as CSV: header `t,<prefix>1,...`, one row per
/// time step, values with 17 significant digits.
pub fn write_signals(path: &Path, prefix: &str, signals: &Tensor) -> Result<()> {
    std::fs::write(path, signals_to_csv(prefix, signals)).map_err(|e| Error::io(path, e))
}

pub fn signals_to_csv(prefix: &str, signals: &Tensor) -> String {
    let (k, t) = signals.dims2().expect("signals are a matrix");
    let mut out = String::from("t");
    for i in 1..=k {
        write!(out, ",{prefix}{i}").unwrap();
    }
    out.push('\n');
    for tau in 0..t {
        write!(out, "{tau}").unwrap();
        for i in 0..k {
            write!(out, ",{:.16e}", signals.at(i, tau)).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Reads a file written by [`write_signals`] back into `[k, T]`.
pub fn read_signals(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let k = header.split(',').count().saturating_sub(1);
    if k == 0 || !header.starts_with("t,") {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let mut columns = vec![Vec::new(); k];
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 1 {
            return Err(bad(format!("line {} has {} fields", lineno + 2, fields.len())));
        }
        for (col, f) in columns.iter_mut().zip(&fields[1..]) {
            col.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?,
            );
        }
    }
    let t = columns[0].len();
    if t == 0 {
        return Err(bad("no data rows".into()));
    }
    Tensor::new(vec![k, t], columns.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_known_values() {
        let z = zscore(&[1.0, 2.0, 3.0]).unwrap();
        let e = 1.5f64.sqrt();
        assert!((z[0] + e).abs() < 1e-12 && z[1].abs() < 1e-15 && (z[2] - e).abs() < 1e-12);
        assert!((z[0] + 1.22474).abs() < 1e-5);
    }

    #[test]
    fn zscore_rejects_constant() {
        assert!(matches!(zscore(&[0.1; 7]), Err(Error::Degenerate(_))));
        assert!(zscore(&[]).is_err());
    }

    #[test]
    fn zscore_is_idempotent_and_affine_invariant() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() + 0.01 * i as f64).collect();
        let z = zscore(&x).unwrap();
        let zz = zscore(&z).unwrap();
        assert!(z.iter().zip(&zz).all(|(a, b)| (a - b).abs() < 1e-12));
        let y: Vec<f64> = x.iter().map(|v| 3.5 * v - 2.0).collect();
        let zy = zscore(&y).unwrap();
        assert!(z.iter().zip(&zy).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn sources_are_deterministic_and_normalized() {
        let spec = SourceSpec::default();
        let a = generate_sources(200, 11, &spec).unwrap();
        let b = generate_sources(200, 11, &spec).unwrap();
        assert_eq!(a, b);
        for i in 0..3 {
            let row = a.sources.row(i);
            let mean = row.iter().sum::<f64>() / 200.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 200.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
        assert!(generate_sources(49, 0, &spec).is_err());
    }

    #[test]
    fn sources_respect_correlation_bound() {
        let spec = SourceSpec::default();
        for seed in 0..5 {
            let s = generate_sources(200, seed, &spec).unwrap();
            let rows: Vec<Vec<f64>> = (0..3).map(|i| s.sources.row(i).to_vec()).collect();
            assert!(max_abs_pairwise_correlation(&rows) < 0.2);
        }
    }

    #[test]
    fn identity_mixing() {
        let s = generate_sources(60, 1, &SourceSpec::default()).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let x = mix(&s.sources, &MixingSpec::new(MixingMode::Linear, eye).unwrap()).unwrap();
        assert_eq!(x, s.sources);
    }

    #[test]
    fn summing_mixture_and_tanh_range() {
        let s = generate_sources(60, 2, &SourceSpec::default()).unwrap();
        let ones = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let x = mix(&s.sources, &MixingSpec::new(MixingMode::Linear, ones.clone()).unwrap()).unwrap();
        for tau in 0..60 {
            let expect = s.sources.at(0, tau) + s.sources.at(1, tau) + s.sources.at(2, tau);
            assert!((x.at(0, tau) - expect).abs() < 1e-12);
        }
        let xn = mix(&s.sources, &MixingSpec::new(MixingMode::Nonlinear, ones).unwrap()).unwrap();
        assert!(xn.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn mixing_dimension_mismatch() {
        let s = generate_sources(60, 2, &SourceSpec::default()).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(mix(&s.sources, &MixingSpec::new(MixingMode::Linear, w).unwrap()).is_err());
    }

    #[test]
    fn random_mixing_is_well_conditioned() {
        for (m, seed) in [(3, 0), (2, 1), (2, 7), (1, 3)] {
            let spec = MixingSpec::random(m, 3, MixingMode::Nonlinear, 1.0, 10.0, seed).unwrap();
            assert_eq!(spec.weights.shape(), &[m, 3]);
            assert!(condition_number(&spec.weights) < 10.0);
        }
        assert!(MixingSpec::random(4, 3, MixingMode::Linear, 1.0, 10.0, 0).is_err());
    }

    #[test]
    fn condition_number_of_known_matrix() {
        let w = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((condition_number(&w) - 3.0).abs() < 1e-12);
        let collinear = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(condition_number(&collinear) > 1e6);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = generate_sources(64, 4, &SourceSpec::default()).unwrap();
        write_signals(&path, "src", &s.sources).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,src1,src2,src3\n0,"));
        assert_eq!(read_signals(&path).unwrap(), s.sources);
    }
}
