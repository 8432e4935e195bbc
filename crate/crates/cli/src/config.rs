//! Experiment configuration: a JSON file plus command-line overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use metasel::baselines::{BaselineMethod, DatisConfig, Metric, NnsConfig, SaConfig};
use metasel::datagen::Corruption;
use metasel::metamodel::MetaNetShape;
use metasel::models::{ArchId, TrainConfig};
use metasel::odin::OdinConfig;

use crate::error::{CliError, CliResult};

/// Where the source train/test sets come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Procedurally generated glyph datasets.
    Synthetic {
        num_classes: usize,
        per_class_train: usize,
        per_class_test: usize,
    },
    /// Externally supplied IDX files (MNIST layout).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// One corruption family with the severity levels to run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftEntry {
    pub corruption: Corruption,
    pub severities: Vec<u8>,
}

/// Epochs and optimizer settings; seeds are derived from the experiment seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl TrainParams {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// A prioritizer selected in the config: the learned estimator or a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    MetaSel,
    Baseline(BaselineMethod),
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::MetaSel => "metasel",
            MethodSpec::Baseline(b) => b.name(),
        }
    }
}

impl FromStr for MethodSpec {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        if s == "metasel" {
            return Ok(MethodSpec::MetaSel);
        }
        BaselineMethod::from_str(s)
            .map(MethodSpec::Baseline)
            .map_err(|_| CliError::Validation(format!("unknown method '{s}'")))
    }
}

impl Serialize for MethodSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MethodSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        MethodSpec::from_str(&s).map_err(serde::de::Error::custom)
    }
}

/// Ensemble baseline settings (training params are shared with fine-tuning).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub n_ensembles: usize,
}

/// The whole experiment as data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub shifts: Vec<ShiftEntry>,
    /// Fine-tuning sample size.
    pub n_s: usize,
    pub arch: ArchId,
    pub train_source: TrainParams,
    pub train_finetune: TrainParams,
    pub train_meta: TrainParams,
    #[serde(default)]
    pub meta_shape: Option<MetaNetShape>,
    /// Deterministic restarts for estimator training; the best validation
    /// loss wins.
    #[serde(default = "default_meta_starts")]
    pub meta_starts: usize,
    pub odin: OdinConfig,
    #[serde(default = "default_nns")]
    pub nns: NnsConfig,
    #[serde(default = "default_datis")]
    pub datis: DatisConfig,
    #[serde(default)]
    pub sa: SaConfig,
    #[serde(default = "default_ensemble")]
    pub ensemble: EnsembleParams,
    pub methods: Vec<MethodSpec>,
    pub budgets: Vec<f64>,
    /// Budgets for the ablation report.
    #[serde(default = "default_ablation_budgets")]
    pub ablation_budgets: Vec<f64>,
    pub out_dir: PathBuf,
}

fn default_nns() -> NnsConfig {
    NnsConfig {
        k: 10,
        alpha: 0.5,
        metric: Metric::Euclidean,
    }
}

fn default_datis() -> DatisConfig {
    DatisConfig { k: 10, tau: 1.0 }
}

fn default_ensemble() -> EnsembleParams {
    EnsembleParams { n_ensembles: 5 }
}

fn default_ablation_budgets() -> Vec<f64> {
    vec![0.01, 0.03, 0.05, 0.10]
}

fn default_meta_starts() -> usize {
    3
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub methods: Option<Vec<MethodSpec>>,
    pub budgets: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("invalid config: {e}")))?;
        if let Some(out) = &overrides.out_dir {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(methods) = &overrides.methods {
            cfg.methods = methods.clone();
        }
        if let Some(budgets) = &overrides.budgets {
            cfg.budgets = budgets.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let fail = |field: &str, msg: String| {
            Err(CliError::Validation(format!("config field '{field}': {msg}")))
        };
        match &self.dataset {
            DatasetSource::Synthetic {
                num_classes,
                per_class_train,
                per_class_test,
            } => {
                if !(2..=100).contains(num_classes) {
                    return fail("dataset.num_classes", format!("{num_classes} outside [2,100]"));
                }
                if *per_class_train == 0 || *per_class_test == 0 {
                    return fail("dataset", "per-class counts must be >= 1".to_string());
                }
            }
            DatasetSource::Idx { .. } => {}
        }
        if self.shifts.is_empty() {
            return fail("shifts", "at least one corruption is required".to_string());
        }
        for s in &self.shifts {
            if s.severities.is_empty() {
                return fail("shifts.severities", "empty severity list".to_string());
            }
            if let Some(&bad) = s.severities.iter().find(|s| !(1..=5).contains(*s)) {
                return fail("shifts.severities", format!("severity {bad} outside [1,5]"));
            }
        }
        if self.n_s == 0 {
            return fail("n_s", "must be >= 1".to_string());
        }
        for (name, t) in [
            ("train_source", &self.train_source),
            ("train_finetune", &self.train_finetune),
            ("train_meta", &self.train_meta),
        ] {
            if let Err(e) = t.with_seed(0).validate() {
                return fail(name, e.to_string());
            }
        }
        if let Err(e) = self.odin.validate() {
            return fail("odin", e.to_string());
        }
        if self.methods.is_empty() {
            return fail("methods", "at least one method is required".to_string());
        }
        if self.budgets.is_empty() {
            return fail("budgets", "at least one budget is required".to_string());
        }
        for list in [&self.budgets, &self.ablation_budgets] {
            if let Some(&bad) = list.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
                return fail("budgets", format!("budget fraction {bad} outside (0,1]"));
            }
        }
        if self.ensemble.n_ensembles == 0 {
            return fail("ensemble.n_ensembles", "must be >= 1".to_string());
        }
        if self.meta_starts == 0 {
            return fail("meta_starts", "must be >= 1".to_string());
        }
        Ok(())
    }

    /// All (corruption, severity) pairs in config order.
    pub fn subjects(&self) -> Vec<(Corruption, u8)> {
        self.shifts
            .iter()
            .flat_map(|s| s.severities.iter().map(|&sev| (s.corruption, sev)))
            .collect()
    }

    /// Short name of the source dataset, used in subject names.
    pub fn source_name(&self) -> String {
        match &self.dataset {
            DatasetSource::Synthetic { num_classes, .. } => format!("glyphs{num_classes}"),
            DatasetSource::Idx { .. } => "idx".to_string(),
        }
    }
}

/// Subject naming: `{source}_{corruption}_{severity}`.
pub fn subject_name(source: &str, corruption: Corruption, severity: u8) -> String {
    format!("{source}_{}_{severity}", corruption.name())
}
