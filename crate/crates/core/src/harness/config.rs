//! Experiment configuration.
//!
//! The on-disk format is TOML restricted to one level of sections:
//!
//! ```toml
//! [dataset]
//! kind = "synthetic_classification"
//! n = 2000
//!
//! [fed]
//! rounds = 60
//! ```
//!
//! Every key has a default; unknown sections and keys are rejected with a
//! `section.key: reason` message.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::TargetKind;
use crate::error::{Error, Result};
use crate::fedengine::{RoundConfig, ServerOptimizer};
use crate::model::Task;
use crate::noise::NoiseMode;
use crate::partition::Scheme;
use crate::quant::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SyntheticClassification,
    SyntheticRegression,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub separation: f64,
    pub noise_sd: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_column: Option<String>,
    pub target_kind: TargetKind,
    pub test_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticClassification,
            n: 2500,
            d: 8,
            c: 10,
            separation: 2.0,
            noise_sd: 0.1,
            seed: 1,
            path: None,
            target_column: None,
            target_kind: TargetKind::Categorical,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub scheme: Scheme,
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
    pub num_pseudo_classes: usize,
    pub num_bins: usize,
    pub min_samples_per_client: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            scheme: Scheme::Labels,
            alpha: 0.5,
            num_clients: 20,
            seed: 0,
            num_pseudo_classes: 10,
            num_bins: crate::partition::DEFAULT_QUANTILE_BINS,
            min_samples_per_client: crate::partition::DEFAULT_MIN_SAMPLES_PER_CLIENT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub ratio: f64,
    pub mode: NoiseMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix_path: Option<PathBuf>,
    pub seed: u64,
    /// Rounds of centralized training behind the confusion-derived matrix.
    pub confusion_epochs: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            ratio: 0.0,
            mode: NoiseMode::Matrix,
            matrix_path: None,
            seed: 0,
            confusion_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `toy-mlp` or `aep-mlp`; ignored when `layers` is set.
    pub preset: String,
    /// Full layer list, input width first and output width last.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "toy-mlp".into(),
            layers: None,
            dropout: None,
            task: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedSection {
    pub rounds: usize,
    pub sample_ratio: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub client_lr: f64,
    pub optimizer: ServerOptimizer,
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for FedSection {
    fn default() -> Self {
        let r = RoundConfig::default();
        Self {
            rounds: r.total_rounds,
            sample_ratio: r.sample_ratio,
            local_epochs: r.local_epochs,
            batch_size: r.batch_size,
            client_lr: r.client_lr,
            optimizer: r.optimizer,
            server_lr: r.server_lr,
            beta1: r.server_betas.0,
            beta2: r.server_betas.1,
            tau: r.server_tau,
            seed: r.master_seed,
            eval_every: r.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub precision: Precision,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            precision: Precision::Full64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub noise: NoiseSection,
    pub model: ModelSection,
    pub fed: FedSection,
    pub quant: QuantSection,
    pub report: ReportSection,
}

const KNOWN_KEYS: &[(&str, &[&str])] = &[
    (
        "dataset",
        &["kind", "n", "d", "c", "separation", "noise_sd", "seed", "path", "target_column", "target_kind", "test_fraction"],
    ),
    (
        "partition",
        &["scheme", "alpha", "num_clients", "seed", "num_pseudo_classes", "num_bins", "min_samples_per_client"],
    ),
    ("noise", &["ratio", "mode", "matrix_path", "seed", "confusion_epochs"]),
    ("model", &["preset", "layers", "dropout", "task"]),
    (
        "fed",
        &[
            "rounds",
            "sample_ratio",
            "local_epochs",
            "batch_size",
            "client_lr",
            "optimizer",
            "server_lr",
            "beta1",
            "beta2",
            "tau",
            "seed",
            "eval_every",
        ],
    ),
    ("quant", &["precision"]),
    ("report", &["seeds", "output_dir"]),
];

fn check_known_keys(table: &toml::Table) -> Result<()> {
    for (section, value) in table {
        let allowed = KNOWN_KEYS
            .iter()
            .find(|(s, _)| s == section)
            .map(|(_, keys)| *keys)
            .ok_or_else(|| Error::config(section.clone(), "unknown section"))?;
        let inner = value
            .as_table()
            .ok_or_else(|| Error::config(section.clone(), "expected a [section] table"))?;
        for key in inner.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::config(format!("{section}.{key}"), "unknown key"));
            }
        }
    }
    Ok(())
}

/// Parses `section.key=value`; the value is read as a TOML literal and
/// falls back to a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like section.key=value"))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::config(path.trim(), "override key must be section.key"))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    entry
        .as_table_mut()
        .ok_or_else(|| Error::config(section, "expected a [section] table"))?
        .insert(key.to_string(), value);
    Ok(())
}

fn deserialize_error(e: toml::de::Error) -> Error {
    Error::config("config", e.message().to_string())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies `section.key=value` overrides in order, then
    /// deserializes. Does not run [`ExperimentConfig::validate`].
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(deserialize_error)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        check_known_keys(&table)?;
        toml::Value::Table(table).try_into().map_err(deserialize_error)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// This config with its overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_with_overrides(&self.to_toml_string(), overrides)
    }

    pub fn round_config(&self, master_seed: u64) -> RoundConfig {
        RoundConfig {
            total_rounds: self.fed.rounds,
            sample_ratio: self.fed.sample_ratio,
            local_epochs: self.fed.local_epochs,
            batch_size: self.fed.batch_size,
            client_lr: self.fed.client_lr,
            optimizer: self.fed.optimizer,
            server_lr: self.fed.server_lr,
            server_betas: (self.fed.beta1, self.fed.beta2),
            server_tau: self.fed.tau,
            master_seed,
            eval_every: self.fed.eval_every,
            precision: self.quant.precision,
        }
    }

    /// Range and file-existence checks. Shape checks that need the dataset
    /// (model widths, target kind vs. scheme) happen when the run is built.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, reason: &str| if ok { Ok(()) } else { Err(Error::config(key, reason)) };
        let d = &self.dataset;
        match d.kind {
            DatasetKind::SyntheticClassification => {
                check(d.c >= 2, "dataset.c", "must be >= 2")?;
                check(d.n >= d.c, "dataset.n", "must be >= dataset.c")?;
                check(d.separation >= 0.0 && d.separation.is_finite(), "dataset.separation", "must be finite and >= 0")?;
            }
            DatasetKind::SyntheticRegression => {
                check(d.n >= 2, "dataset.n", "must be >= 2")?;
                check(d.noise_sd >= 0.0 && d.noise_sd.is_finite(), "dataset.noise_sd", "must be finite and >= 0")?;
            }
            DatasetKind::Csv => {
                let path = d.path.as_ref().ok_or_else(|| Error::config("dataset.path", "required for csv datasets"))?;
                check(path.exists(), "dataset.path", &format!("file {} does not exist", path.display()))?;
                check(d.target_column.is_some(), "dataset.target_column", "required for csv datasets")?;
            }
        }
        if d.kind != DatasetKind::Csv {
            check(d.d >= 1, "dataset.d", "must be >= 1")?;
        }
        check(d.test_fraction > 0.0 && d.test_fraction < 1.0, "dataset.test_fraction", "must be in (0, 1)")?;

        let p = &self.partition;
        check(p.num_clients >= 1, "partition.num_clients", "must be >= 1")?;
        check(p.alpha > 0.0 && p.alpha.is_finite(), "partition.alpha", "must be finite and > 0")?;
        check(p.num_pseudo_classes >= 1, "partition.num_pseudo_classes", "must be >= 1")?;
        check(p.num_bins >= 1, "partition.num_bins", "must be >= 1")?;
        check(p.min_samples_per_client >= 1, "partition.min_samples_per_client", "must be >= 1")?;

        let n = &self.noise;
        check((0.0..=1.0).contains(&n.ratio), "noise.ratio", "must be in [0, 1]")?;
        if let Some(path) = &n.matrix_path {
            check(path.exists(), "noise.matrix_path", &format!("file {} does not exist", path.display()))?;
        }
        check(n.confusion_epochs >= 1, "noise.confusion_epochs", "must be >= 1")?;

        let m = &self.model;
        if m.layers.is_none() {
            check(
                m.preset == "toy-mlp" || m.preset == "aep-mlp",
                "model.preset",
                "must be toy-mlp or aep-mlp",
            )?;
        }
        if let Some(rate) = m.dropout {
            check((0.0..1.0).contains(&rate), "model.dropout", "must be in [0, 1)")?;
        }

        let f = &self.fed;
        check(f.sample_ratio > 0.0 && f.sample_ratio <= 1.0, "fed.sample_ratio", "must be in (0, 1]")?;
        check(f.local_epochs >= 1, "fed.local_epochs", "must be >= 1")?;
        check(f.batch_size >= 1, "fed.batch_size", "must be >= 1")?;
        check(f.client_lr > 0.0 && f.client_lr.is_finite(), "fed.client_lr", "must be finite and > 0")?;
        self.round_config(0).validate()?;

        check(!self.report.seeds.is_empty(), "report.seeds", "must list at least one seed")?;
        Ok(())
    }
}
