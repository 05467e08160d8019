//! Experiment configuration: one JSON file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use mbbr_core::data::{LabelSource, SyntheticConfig, DEFAULT_LABEL_DIM};
use mbbr_core::encoder::EncoderConfig;
use mbbr_core::eval::{FewShotEvalConfig, ProbeConfig, DEFAULT_SWEEP_RATIOS};
use mbbr_core::mbbr::PretrainConfig;
use mbbr_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Where scenes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory; the generator seed is derived from the top-level seed.
    Synthetic(SyntheticConfig),
    /// Scene JSONL on disk.
    File {
        path: PathBuf,
        num_categories: usize,
        num_predicates: usize,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

impl DataSource {
    pub fn num_categories(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.num_categories,
            DataSource::File { num_categories, .. } => *num_categories,
        }
    }

    pub fn num_predicates(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.num_predicates,
            DataSource::File { num_predicates, .. } => *num_predicates,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub mask_ratios: Vec<f64>,
    pub probe: ProbeConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            mask_ratios: DEFAULT_SWEEP_RATIOS.to_vec(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Top-level seed; every stage seed is derived from it.
    pub seed: u64,
    pub precision: Precision,
    /// Not echoed into artifacts, so moving a run does not change its hashes.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub data: DataSource,
    pub labels: LabelSource,
    /// Fraction of scenes held out for evaluation.
    pub test_fraction: f64,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub evaluation: FewShotEvalConfig,
    pub k_shots: Vec<usize>,
    /// Evaluation repetitions.
    pub seeds: Vec<u64>,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            precision: Precision::F64,
            out: PathBuf::from("runs"),
            data: DataSource::default(),
            labels: LabelSource::Grouped {
                seed: 0,
                dim: DEFAULT_LABEL_DIM,
                num_groups: SyntheticConfig::default().num_groups,
            },
            test_fraction: 0.2,
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            evaluation: FewShotEvalConfig::default(),
            k_shots: vec![1, 5, 10],
            seeds: vec![0, 1, 2, 3, 4],
            ablation: AblationConfig::default(),
        }
    }
}

/// Flag values that win over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub precision: Option<Precision>,
    pub data: Option<PathBuf>,
    pub epochs: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, source: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("{source}: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Applies overrides, derives stage seeds and validates.
    pub fn resolve(mut self, o: &Overrides) -> CliResult<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(p) = o.precision {
            self.precision = p;
        }
        if let Some(path) = &o.data {
            let (num_categories, num_predicates) = (self.data.num_categories(), self.data.num_predicates());
            self.data = DataSource::File { path: path.clone(), num_categories, num_predicates };
        }
        if let Some(e) = o.epochs {
            self.pretrain.epochs = e;
        }
        if let DataSource::Synthetic(s) = &mut self.data {
            s.seed = derive_seed(self.seed, "synth");
        }
        self.pretrain.seed = derive_seed(self.seed, "pretrain");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> CliResult<()> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!("test_fraction {} must lie in (0, 1)", self.test_fraction));
        }
        match &self.data {
            DataSource::Synthetic(s) => s.validate()?,
            DataSource::File { path, .. } => {
                if !path.exists() {
                    return fail(format!("data path {} does not exist", path.display()));
                }
            }
        }
        if let LabelSource::File { path } = &self.labels {
            if !path.exists() {
                return fail(format!("label embedding path {} does not exist", path.display()));
            }
        }
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.evaluation.few_shot.ablation.validate()?;
        self.evaluation.few_shot.fit.validate()?;
        if self.evaluation.n == 0 {
            return fail("evaluation.n must be positive".into());
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
