//! End-to-end runs: data generation, training, evaluation and artifacts.
//!
//! Layout of one seed's directory:
//!
//! ```text
//! config.json               resolved configuration (rerunnable)
//! sources.csv               ground truth, t,src1..src3
//! observations.csv          raw mixtures, t,obs1..obsm
//! inferred_<variant>.csv    posterior means, t,z1..z3
//! history_<variant>.csv     epoch,recon,kl,adv,ee,total
//! checkpoint_<variant>.json model parameters
//! report.csv / report.json  matched RMSE table and metadata
//! ```
//!
//! With several seeds each gets a `seed-<s>` subdirectory and the top
//! level holds `summary.csv` (mean average RMSE per variant).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::autodiff::Tensor;
use crate::config::{ExperimentConfig, SOURCE_COUNT};
use crate::error::{Error, Result};
use crate::eval::{format_table_value, match_components, write_report, EvalReport};
use crate::models::{Checkpoint, ModelParams, ModelVariant};
use crate::synth::{generate_sources, mix, read_signals, write_signals, zscore_rows, MixingSpec, SourceSet};
use crate::trainer::{train, write_history, TrainOutcome};

pub const CONFIG_FILE: &str = "config.json";
pub const SOURCES_FILE: &str = "sources.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn inferred_file(v: ModelVariant) -> String {
    format!("inferred_{v}.csv")
}

pub fn history_file(v: ModelVariant) -> String {
    format!("history_{v}.csv")
}

pub fn checkpoint_file(v: ModelVariant) -> String {
    format!("checkpoint_{v}.json")
}

/// Synthetic data for one seed.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sources: SourceSet,
    pub mixing: MixingSpec,
    /// Raw mixtures `[m, T]`.
    pub observations: Tensor,
}

impl Dataset {
    /// Per-channel z-scored observations, as seen by the models.
    pub fn model_input(&self) -> Result<Tensor> {
        zscore_rows(&self.observations)
    }
}

pub fn generate_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let sources = generate_sources(cfg.t, seed, &cfg.sources)?;
    let mixing = MixingSpec::random(
        cfg.observed(),
        SOURCE_COUNT,
        cfg.mixing.mode,
        cfg.mixing.gain,
        cfg.mixing.max_condition,
        seed,
    )?;
    let observations = mix(&sources.sources, &mixing)?;
    Ok(Dataset {
        sources,
        mixing,
        observations,
    })
}

/// Result of one seed.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub reports: Vec<EvalReport>,
}

/// Directory used for `seed` under `cfg.out_dir`.
pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    if cfg.seeds.len() == 1 {
        cfg.out_dir.clone()
    } else {
        cfg.out_dir.join(format!("seed-{seed}"))
    }
}

/// The configuration written into a seed's directory: rerunning it
/// reproduces that directory.
pub fn seed_config(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![seed],
        out_dir: seed_dir(cfg, seed),
        ..cfg.clone()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes configuration and data files only.
pub fn generate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        let scfg = seed_config(cfg, seed);
        let dir = scfg.out_dir.clone();
        create_dir(&dir)?;
        write_text(&dir.join(CONFIG_FILE), &scfg.emit())?;
        let data = generate_dataset(&scfg, seed)?;
        write_data(&dir, &data)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

fn write_data(dir: &Path, data: &Dataset) -> Result<()> {
    write_signals(&dir.join(SOURCES_FILE), "src", &data.sources.sources)?;
    write_signals(&dir.join(OBSERVATIONS_FILE), "obs", &data.observations)
}

/// Runs every seed and model of `cfg`; `parallel` trains the models of
/// a seed concurrently.
pub fn run_experiment(cfg: &ExperimentConfig, parallel: bool) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        outcomes.push(run_seed(&seed_config(cfg, seed), parallel)?);
    }
    if cfg.seeds.len() > 1 {
        write_text(&cfg.out_dir.join(CONFIG_FILE), &cfg.emit())?;
        write_text(&cfg.out_dir.join(SUMMARY_FILE), &summary_csv(cfg, &outcomes))?;
    }
    Ok(outcomes)
}

/// Runs the single seed of a seed configuration (see [`seed_config`]).
pub fn run_seed(cfg: &ExperimentConfig, parallel: bool) -> Result<SeedOutcome> {
    let seed = cfg.seeds[0];
    let dir = cfg.out_dir.clone();
    create_dir(&dir)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.emit())?;
    let data = generate_dataset(cfg, seed)?;
    write_data(&dir, &data)?;
    let x = data.model_input()?;

    log::info!(
        "seed {seed}: training {} model(s) in {}",
        cfg.models.len(),
        dir.display()
    );
    let train_one = |v: ModelVariant| -> Result<TrainOutcome> {
        let tc = cfg.train_config(v, seed);
        let out = train(&tc, &x)?;
        log::info!("seed {seed}: {v} finished");
        Ok(out)
    };
    let results: Vec<Result<TrainOutcome>> = if parallel && cfg.models.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg.models.iter().map(|&v| s.spawn(move || train_one(v))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        })
    } else {
        cfg.models.iter().map(|&v| train_one(v)).collect()
    };

    let mut reports = Vec::new();
    for (&v, result) in cfg.models.iter().zip(results) {
        let out = result?;
        write_history(&dir.join(history_file(v)), &out.history)?;
        out.params
            .to_checkpoint(&cfg.training.architecture)
            .save(&dir.join(checkpoint_file(v)))?;
        reports.push(evaluate_model(cfg, &out.params, &data, &x, &dir)?);
    }
    write_report(
        &reports,
        seed,
        &cfg.config_hash(),
        report_metadata(cfg, &data),
        &dir.join(REPORT_FILE),
    )?;
    Ok(SeedOutcome { seed, dir, reports })
}

fn evaluate_model(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    data: &Dataset,
    x: &Tensor,
    dir: &Path,
) -> Result<EvalReport> {
    let mu = params.inferred_means(x)?;
    write_signals(&dir.join(inferred_file(params.variant)), "z", &mu)?;
    Ok(match_components(&mu, &data.sources.sources)?.labelled(params.variant.as_str(), cfg.scenario.as_str()))
}

fn report_metadata(cfg: &ExperimentConfig, data: &Dataset) -> serde_json::Value {
    json!({
        "t": cfg.t,
        "m": cfg.observed(),
        "n": SOURCE_COUNT,
        "models": cfg.models,
        "source_draws": data.sources.draws,
        "mixing_mode": data.mixing.mode,
        "mixing_weights": (0..data.mixing.observed()).map(|i| data.mixing.weights.row(i).to_vec()).collect::<Vec<_>>(),
    })
}

/// Rebuilds `report.csv`/`report.json` of a seed directory from its
/// checkpoints.
pub fn evaluate_dir(dir: &Path) -> Result<Vec<EvalReport>> {
    let config_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let cfg = crate::config::parse_config(&text)?;
    let seed = cfg.seeds[0];
    let data = generate_dataset(&cfg, seed)?;
    let truth = read_signals(&dir.join(SOURCES_FILE))?;
    let observed = read_signals(&dir.join(OBSERVATIONS_FILE))?;
    if truth.shape() != data.sources.sources.shape() || observed.shape() != data.observations.shape() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            message: "signal files do not match the configuration".into(),
        });
    }
    let data = Dataset {
        sources: SourceSet {
            sources: truth,
            ..data.sources
        },
        observations: observed,
        ..data
    };
    let x = data.model_input()?;
    let mut reports = Vec::new();
    for &v in &cfg.models {
        let path = dir.join(checkpoint_file(v));
        if !path.exists() {
            log::warn!("no checkpoint for {v} in {}", dir.display());
            continue;
        }
        let params = ModelParams::from_checkpoint(&Checkpoint::load(&path)?)?;
        reports.push(evaluate_model(&cfg, &params, &data, &x, dir)?);
    }
    if reports.is_empty() {
        return Err(Error::Usage(format!("no checkpoints found in {}", dir.display())));
    }
    write_report(
        &reports,
        seed,
        &cfg.config_hash(),
        report_metadata(&cfg, &data),
        &dir.join(REPORT_FILE),
    )?;
    Ok(reports)
}

/// Mean of each variant's average RMSE across seeds.
pub fn mean_average_rmse(outcomes: &[SeedOutcome], variant: ModelVariant) -> Option<f64> {
    let values: Vec<f64> = outcomes
        .iter()
        .flat_map(|o| {
            o.reports
                .iter()
                .filter(|r| r.variant == variant.as_str())
                .map(|r| r.average)
        })
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn summary_csv(cfg: &ExperimentConfig, outcomes: &[SeedOutcome]) -> String {
    let mut out = String::from("seed");
    for v in &cfg.models {
        write!(out, ",{v}").unwrap();
    }
    out.push('\n');
    for o in outcomes {
        write!(out, "{}", o.seed).unwrap();
        for r in &o.reports {
            write!(out, ",{}", format_table_value(r.average)).unwrap();
        }
        out.push('\n');
    }
    out.push_str("Mean");
    for &v in &cfg.models {
        write!(
            out,
            ",{}",
            format_table_value(mean_average_rmse(outcomes, v).unwrap_or(f64::NAN))
        )
        .unwrap();
    }
    out.push('\n');
    out
}
