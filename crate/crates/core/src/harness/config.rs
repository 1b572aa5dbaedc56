//! Experiment configuration: a strict JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{AdapterKind, CascadeSpec, PretrainConfig};
use crate::cell::CellMode;
use crate::error::{Error, Result};
use crate::harness::data::{generate_synthetic, Dataset, Domain, SyntheticParams};
use crate::objective::PenaltyConfig;
use crate::search::SearchConfig;

/// Generator settings shared by both domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub source_samples: usize,
    pub target_samples: usize,
    pub dim: usize,
    pub labels: usize,
    pub intermediate_classes: usize,
    pub jitter: f64,
    pub source_noise: f64,
    pub target_noise: f64,
    pub target_shift: f64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        let p = SyntheticParams::default();
        Self {
            source_samples: 800,
            target_samples: 400,
            dim: p.dim,
            labels: p.labels,
            intermediate_classes: p.intermediate_classes,
            jitter: p.jitter,
            source_noise: p.source_noise,
            target_noise: p.target_noise,
            target_shift: p.target_shift,
        }
    }
}

impl SyntheticData {
    pub fn params(&self, domain: Domain) -> SyntheticParams {
        SyntheticParams {
            n_samples: match domain {
                Domain::Source => self.source_samples,
                Domain::Target => self.target_samples,
            },
            dim: self.dim,
            labels: self.labels,
            intermediate_classes: self.intermediate_classes,
            jitter: self.jitter,
            source_noise: self.source_noise,
            target_noise: self.target_noise,
            target_shift: self.target_shift,
            domain,
        }
    }
}

/// Source-domain data pretrains the upstream stages; target-domain data is
/// split for the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticData),
    Files { source: PathBuf, target: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticData::default())
    }
}

impl DataSource {
    /// `(source, target)` datasets. Synthetic data is drawn from `seed`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic(s) => Ok((
                generate_synthetic(&s.params(Domain::Source), seed)?,
                generate_synthetic(&s.params(Domain::Target), seed)?,
            )),
            DataSource::Files { source, target } => Ok((Dataset::load(source)?, Dataset::load(target)?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Largest scheme space the oracle will enumerate.
    pub cap: usize,
    /// Training epochs per scheme; defaults to the stage-two budget, or the
    /// stage-one budget when stage two is off.
    pub epochs: Option<usize>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { cap: 243, epochs: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub cascade: CascadeSpec,
    pub adapters: Vec<AdapterKind>,
    pub mode: CellMode,
    pub penalty: PenaltyConfig,
    pub search: SearchConfig,
    pub pretrain: PretrainConfig,
    pub data: DataSource,
    pub oracle: OracleConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cascade: CascadeSpec::toy(),
            adapters: vec![AdapterKind::Bottleneck],
            mode: CellMode::Nfa,
            penalty: PenaltyConfig::default(),
            search: SearchConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataSource::default(),
            oracle: OracleConfig::default(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative data paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let DataSource::Files { source, target } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [source, target] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validation.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.cascade.validate()?;
        if self.adapters.is_empty() {
            return Err(Error::Config("at least one adapter candidate is required".into()));
        }
        let mut kinds = self.adapters.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.adapters.len() {
            return Err(Error::Config("adapter candidates must be distinct".into()));
        }
        if self.mode == CellMode::Na && self.adapters.len() != 1 {
            return Err(Error::Config("na mode takes exactly one adapter candidate".into()));
        }
        self.penalty.validate()?;
        self.search.validate()?;
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(Error::Config("pretrain needs a positive batch_size and lr".into()));
        }
        if self.oracle.cap == 0 {
            return Err(Error::Config("oracle cap must be positive".into()));
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                if s.dim != self.cascade.input_dim().unwrap_or(0) || s.labels != self.cascade.labels {
                    return Err(Error::Config(format!(
                        "synthetic data (dim {}, {} labels) does not fit the cascade (dim {:?}, {} labels)",
                        s.dim,
                        s.labels,
                        self.cascade.input_dim(),
                        self.cascade.labels
                    )));
                }
                if s.source_samples == 0 || s.target_samples < 2 {
                    return Err(Error::Config("synthetic data needs source samples and >= 2 target samples".into()));
                }
            }
            DataSource::Files { source, target } => {
                for p in [source, target] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("data file {} does not exist", p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Oracle epochs per scheme.
    pub fn oracle_epochs(&self) -> usize {
        self.oracle.epochs.unwrap_or(if self.search.stage2_epochs > 0 {
            self.search.stage2_epochs
        } else {
            self.search.stage1_epochs
        })
    }

    /// SHA-256 over the canonical JSON of every setting that shapes results.
    /// The seed and the output location are excluded.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("seed");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }
}
