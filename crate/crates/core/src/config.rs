//! Experiment configuration: JSON documents, `key=value` overrides and
//! validation with key paths.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::ModelVariant;
use crate::synth::{MixingMode, SourceSpec, MIN_LENGTH};
use crate::trainer::{TrainConfig, TrainSettings};

/// Number of synthetic sources produced by the generator.
pub const SOURCE_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// As many observations as sources.
    Determined,
    /// Fewer observations than sources.
    Underdetermined,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Determined => "determined",
            Scenario::Underdetermined => "underdetermined",
        }
    }

    pub fn default_observed(self) -> usize {
        match self {
            Scenario::Determined => SOURCE_COUNT,
            Scenario::Underdetermined => SOURCE_COUNT - 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingConfig {
    pub mode: MixingMode,
    /// Norm of every row of the mixing matrix.
    pub gain: f64,
    pub max_condition: f64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig {
            mode: MixingMode::Nonlinear,
            gain: 1.0,
            max_condition: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub models: Vec<ModelVariant>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Sequence length.
    pub t: usize,
    /// Observed channels; filled from the scenario when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    pub sources: SourceSpec,
    pub mixing: MixingConfig,
    pub training: TrainSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Underdetermined,
            models: ModelVariant::ALL.to_vec(),
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            t: 200,
            m: None,
            sources: SourceSpec::default(),
            mixing: MixingConfig::default(),
            training: TrainSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults for `scenario` with `m` filled in.
    pub fn for_scenario(scenario: Scenario) -> Self {
        let cfg = ExperimentConfig {
            scenario,
            ..ExperimentConfig::default()
        };
        cfg.resolve().expect("defaults are valid")
    }

    /// Observed channel count (after [`ExperimentConfig::resolve`]).
    pub fn observed(&self) -> usize {
        self.m.unwrap_or_else(|| self.scenario.default_observed())
    }

    /// Fills derived fields and validates every constraint.
    pub fn resolve(mut self) -> Result<Self> {
        self.m = Some(self.observed());
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.models.is_empty() {
            return bad("models", "at least one model is required".into());
        }
        for (i, v) in self.models.iter().enumerate() {
            if self.models[..i].contains(v) {
                return bad(&format!("models[{i}]"), format!("{v} listed twice"));
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return bad(&format!("seeds[{i}]"), format!("seed {s} listed twice"));
            }
        }
        if self.out_dir.as_os_str().is_empty() {
            return bad("out_dir", "must not be empty".into());
        }
        if self.t < MIN_LENGTH {
            return bad("t", format!("must be at least {MIN_LENGTH}, got {}", self.t));
        }
        let m = self.observed();
        match self.scenario {
            Scenario::Determined if m != SOURCE_COUNT => {
                return bad(
                    "m",
                    format!("determined scenario needs m = n = {SOURCE_COUNT}, got {m}"),
                );
            }
            Scenario::Underdetermined if m == 0 || m >= SOURCE_COUNT => {
                return bad(
                    "m",
                    format!("underdetermined scenario needs 1 <= m < n = {SOURCE_COUNT}, got {m}"),
                );
            }
            _ => {}
        }
        let s = &self.sources;
        for (key, v) in [
            ("sources.slow_cycles", s.slow_cycles),
            ("sources.gp_length_scale", s.gp_length_scale),
            ("sources.fast_cycles", s.fast_cycles),
            ("sources.max_abs_correlation", s.max_abs_correlation),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, format!("must be positive, got {v}"));
            }
        }
        if !(s.slow_drift >= 0.0 && s.slow_drift.is_finite()) {
            return bad(
                "sources.slow_drift",
                format!("must be non-negative, got {}", s.slow_drift),
            );
        }
        if !(self.mixing.gain > 0.0 && self.mixing.gain.is_finite()) {
            return bad("mixing.gain", format!("must be positive, got {}", self.mixing.gain));
        }
        if !(self.mixing.max_condition >= 1.0) {
            return bad(
                "mixing.max_condition",
                format!("must be at least 1, got {}", self.mixing.max_condition),
            );
        }
        self.training.validate().map_err(|e| e.within("training"))?;
        if let Some(b) = self.training.adversarial_batch {
            if b > self.t {
                return bad(
                    "training.adversarial_batch",
                    format!("must be at most t = {}, got {b}", self.t),
                );
            }
        }
        if self.training.architecture.encoder_hidden.is_some() && !self.models.contains(&ModelVariant::GpAvae) {
            return bad(
                "training.architecture.encoder_hidden",
                "only applies to gp-avae, which is not among the models".into(),
            );
        }
        Ok(())
    }

    /// Training configuration for one model and seed.
    pub fn train_config(&self, variant: ModelVariant, seed: u64) -> TrainConfig {
        let mut settings = self.training.clone();
        if !variant.has_encoder() {
            settings.architecture.encoder_hidden = None;
        }
        TrainConfig {
            variant,
            seed,
            t: self.t,
            m: self.observed(),
            n: SOURCE_COUNT,
            settings,
        }
    }

    /// Pretty JSON; `parse_config(&cfg.emit())` returns `cfg`.
    pub fn emit(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Digest of everything that affects results (the output directory
    /// is excluded).
    pub fn config_hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        let text = serde_json::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses and resolves a JSON document. Blank text yields the defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with::<&str>(text, &[])
}

/// Like [`parse_config`], applying `key=value` overrides first. Keys are
/// dotted paths (`training.lambda`); values are JSON, or plain strings
/// when they do not parse as JSON.
pub fn parse_config_with<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<ExperimentConfig> {
    let mut doc: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| Error::config("$", e.to_string()))?
    };
    for o in overrides {
        apply_override(&mut doc, o.as_ref())?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        Error::config(
            if path == "." { "$".to_string() } else { path },
            e.into_inner().to_string(),
        )
    })?;
    cfg.resolve()
}

/// Sets `key` (dotted path) in `doc` to the value in `assignment`
/// (`key=value`), creating intermediate objects.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "malformed override key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            _ => return Err(Error::config(parts[..i].join("."), "is not an object")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}
