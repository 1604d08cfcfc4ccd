//! Strict TOML configuration for single runs and sweep experiments.
//!
//! Every section deserializes with `deny_unknown_fields`, so a typo like
//! `nfe_steps` is a load-time error naming the key instead of a silently
//! ignored setting. Sweeps modify the base config through dotted paths
//! (`filter.gap`, `dynamics.forcing`); the updated tree is re-deserialized,
//! which re-applies the same strict validation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use masf_core::dynamics::DynamicsModel;
use masf_core::filter::{FilterConfig, FilterSettings, Method};
use masf_core::measurement::OperatorSpec;
use masf_core::net::{NetConfig, TrainConfig};
use masf_core::sampler::SamplerConfig;
use masf_core::schedule::Schedule;

/// One fully-specified filtering run, as written in a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Master seed; every subsystem stream derives from it.
    #[serde(default)]
    pub seed: u64,
    /// Free-form notes on intentional departures from reference settings
    /// (reduced architectures, shortened horizons); echoed into manifests.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deviations: Vec<String>,
    pub filter: FilterSettings,
    #[serde(default = "Schedule::cosine")]
    pub schedule: Schedule,
    #[serde(default)]
    pub operator: OperatorSpec,
    pub dynamics: DynamicsModel,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

impl RunSpec {
    /// Assembles the core filter configuration (pure restructuring).
    pub fn to_filter_config(&self) -> FilterConfig {
        FilterConfig {
            settings: self.filter.clone(),
            schedule: self.schedule.clone(),
            operator: self.operator.clone(),
            dynamics: self.dynamics.clone(),
            net: self.net.clone(),
            train: self.train.clone(),
            sampler: self.sampler.clone(),
        }
    }

    /// Validates the assembled config; returns warnings for legal-but-odd
    /// settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        Ok(self.to_filter_config().validate()?)
    }

    /// Copy with `value` applied at the dotted `path`. Missing sections fail
    /// here; misspelled leaf keys and type mismatches fail in the strict
    /// re-deserialization.
    pub fn with_override(&self, path: &str, value: &toml::Value) -> Result<RunSpec> {
        let mut tree = serde_json::to_value(self)?;
        let segments: Vec<&str> = path.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            bail!("config path '{path}' has an empty segment");
        }
        let (leaf, sections) = segments.split_last().expect("split produced a segment");
        let mut node = &mut tree;
        for seg in sections {
            node = node
                .get_mut(*seg)
                .ok_or_else(|| anyhow!("config path '{path}': no section '{seg}'"))?;
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("config path '{path}' does not end in a section"))?;
        obj.insert((*leaf).to_string(), serde_json::to_value(value)?);
        serde_json::from_value(tree)
            .with_context(|| format!("applying {path} = {value} to the base config"))
    }
}

/// Loads and validates a single-run config; returns the spec plus warnings.
pub fn load_run_spec(path: &Path) -> Result<(RunSpec, Vec<String>)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: RunSpec =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let warnings = spec.validate()?;
    Ok((spec, warnings))
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_methods() -> Vec<Method> {
    vec![Method::Masf, Method::Enkf]
}

fn default_budget() -> f64 {
    1e10
}

/// One sweep axis: a dotted config path and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub path: String,
    pub values: Vec<toml::Value>,
}

/// A sweep: cartesian product of axes × seeds × methods over a base run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Ceiling on the estimated sweep cost, summed over runs as
    /// members x nfe x steps x dim (nfe counts 1 for EnKF runs). Large
    /// state dimensions are legal but must be unlocked deliberately.
    #[serde(default = "default_budget")]
    pub budget: f64,
    #[serde(default)]
    pub sweep: Vec<SweepAxis>,
    pub base: RunSpec,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must be non-empty");
        }
        if self.methods.is_empty() {
            bail!("methods must be non-empty");
        }
        let mut methods = self.methods.clone();
        methods.dedup();
        if methods.len() != self.methods.len() {
            bail!("methods contains duplicates");
        }
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            bail!("budget must be finite and positive");
        }
        for axis in &self.sweep {
            if axis.values.is_empty() {
                bail!("sweep axis '{}' has no values", axis.path);
            }
        }
        self.base.validate()?;
        Ok(())
    }
}

/// Loads and validates an experiment spec.
pub fn load_experiment_spec(path: &Path) -> Result<ExperimentSpec> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: ExperimentSpec =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}
