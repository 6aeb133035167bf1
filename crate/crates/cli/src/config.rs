use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dpmobility::forecast::{GradientPerturbation, PipelineConfig, RmseForm};
use dpmobility::neural::{Activation, CellKind};
use dpmobility::privacy::PrivacyParams;
use dpmobility::tune::Strategy;

use crate::CliError;

/// Experiment file. Every section is optional; unknown keys are errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Count CSV, relative to the config file's directory.
    pub dataset: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub clean: CleanSection,
    pub data: DataSection,
    pub privacy: Option<PrivacySection>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub tune: TuneSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanSection {
    pub enabled: bool,
}

impl Default for CleanSection {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Inclusive start timestamp of the period to use.
    pub start: Option<String>,
    /// Exclusive end timestamp.
    pub end: Option<String>,
    pub train_days: usize,
    pub test_days: usize,
    pub lag: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            start: None,
            end: None,
            train_days: 65,
            test_days: 7,
            lag: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default = "one")]
    pub sensitivity: f64,
    #[serde(default)]
    pub clamp: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub cell: CellKind,
    pub bidirectional: bool,
    pub h1: usize,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            cell: p.cell,
            bidirectional: p.bidirectional,
            h1: p.hidden,
            activation: p.activation,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunChoice {
    Baseline,
    #[default]
    Nonprivate,
    GradientPerturbation,
    InputPerturbation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub kind: RunChoice,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub rmse_form: RmseForm,
    pub dp: Option<DpSection>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            kind: RunChoice::Nonprivate,
            batch: p.batch_size,
            lr: p.learning_rate,
            epochs: p.epochs,
            rmse_form: p.rmse_form,
            dp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub clip: f64,
    pub noise_multiplier: f64,
    #[serde(default = "five")]
    pub microbatches: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn five() -> usize {
    5
}

fn default_delta() -> f64 {
    1e-7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    pub budget: usize,
    pub strategy: Strategy,
    /// Clip norms searched in DP-SGD campaigns.
    pub clip: Vec<f64>,
}

impl Default for TuneSection {
    fn default() -> Self {
        Self {
            budget: 100,
            strategy: Strategy::Random,
            clip: vec![1.0, 1.5, 2.0, 2.5],
        }
    }
}

/// A parsed config plus its verbatim text and location.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub text: String,
    pub path: Option<PathBuf>,
}

impl Loaded {
    pub fn read(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self {
                config: ExperimentConfig::default(),
                text: String::new(),
                path: None,
            });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let config = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Ok(Self {
            config,
            text,
            path: Some(path.to_path_buf()),
        })
    }

    /// Dataset path: the override if given, else the config entry resolved
    /// against the config file's directory.
    pub fn dataset(&self, override_path: Option<&Path>) -> Result<PathBuf, CliError> {
        if let Some(p) = override_path {
            return Ok(p.to_path_buf());
        }
        let d = self
            .config
            .dataset
            .as_ref()
            .ok_or_else(|| CliError::Usage("no dataset: set `dataset` in the config or pass --data".into()))?;
        Ok(match self.path.as_ref().and_then(|p| p.parent()) {
            Some(dir) if d.is_relative() => dir.join(d),
            _ => d.clone(),
        })
    }
}

impl ExperimentConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            train_days: self.data.train_days,
            test_days: self.data.test_days,
            lag: self.data.lag,
            cell: self.model.cell,
            bidirectional: self.model.bidirectional,
            hidden: self.model.h1,
            activation: self.model.activation,
            batch_size: self.train.batch,
            learning_rate: self.train.lr,
            epochs: self.train.epochs,
            rmse_form: self.train.rmse_form,
        }
    }

    pub fn privacy_params(&self) -> Result<PrivacyParams, CliError> {
        let p = self
            .privacy
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs a [privacy] section".into()))?;
        Ok(PrivacyParams {
            epsilon: p.epsilon,
            delta: p.delta,
            sensitivity: p.sensitivity,
        })
    }

    pub fn gradient_perturbation(&self) -> Result<GradientPerturbation, CliError> {
        let dp = self
            .train
            .dp
            .as_ref()
            .ok_or_else(|| CliError::Usage("gradient perturbation needs a [train.dp] section".into()))?;
        Ok(GradientPerturbation {
            l2_norm_clip: dp.clip,
            noise_multiplier: dp.noise_multiplier,
            num_microbatches: dp.microbatches,
            delta: dp.delta,
        })
    }

    /// Configured seeds, or `base, base+1, …` when a base seed is given.
    pub fn seeds(&self, base: Option<u64>) -> Vec<u64> {
        let n = self.seeds.as_ref().map_or(10, Vec::len).max(1);
        match (base, &self.seeds) {
            (Some(b), _) => (0..n as u64).map(|i| b + i).collect(),
            (None, Some(s)) if !s.is_empty() => s.clone(),
            _ => (0..n as u64).collect(),
        }
    }
}
