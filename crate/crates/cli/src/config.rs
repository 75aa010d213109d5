//! Run configuration files and dataset resolution.

use std::ffi::OsString;
use std::fs::File;
use std::path::{Path, PathBuf};

use qfair::data::{LabeledSample, ProtocolKind};
use qfair::ingest::{generate_synthetic, load_dataset, read_prepared, DatasetSchema, SyntheticSpec};
use qfair::linear::{ClassWeighting, TrainerConfig, TrainerKind};
use qfair::protocol::{Estimator, Grid, PipelineConfig, ProtocolSpec, DEFAULT_SAMPLE_SIZE};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub protocol: ProtocolConfig,
    pub pipeline: PipelineSection,
    /// Output directory, relative to the config file.
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; all cores when absent.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Schema file plus raw CSV.
    pub schema: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    /// Output of `qfair prepare`.
    pub prepared: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
}

/// Synthetic data with the sensitive attribute on half of the features and
/// the target on the other half.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub dim: usize,
    /// Probabilities of the `(s, y)` cells `(0,0), (0,1), (1,0), (1,1)`.
    pub cell_probs: [f64; 4],
    #[serde(default = "one")]
    pub s_gap: f64,
    #[serde(default = "one")]
    pub y_gap: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub protocols: Vec<ProtocolKind>,
    #[serde(default)]
    pub scale: Scale,
    pub n_splits: Option<usize>,
    pub n_repeats: Option<usize>,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    /// Overrides the default grid of every listed protocol.
    pub grid: Option<Grid>,
}

fn default_sample_size() -> usize {
    DEFAULT_SAMPLE_SIZE
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    /// Method labels such as `SLD`, `PACC-nosD2` or `Oracle`.
    pub methods: Vec<Estimator>,
    #[serde(default)]
    pub trainer: TrainerKind,
    /// Adds the single-quantifier variant of every listed method.
    #[serde(default)]
    pub ablation: bool,
    #[serde(default = "default_pseudocount")]
    pub pseudocount: f64,
}

fn default_pseudocount() -> f64 {
    qfair::fairness::DEFAULT_PSEUDOCOUNT
}

/// A parsed configuration together with the directory its relative paths
/// are resolved against.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Loaded { config, base };
        loaded.validate()?;
        Ok(loaded)
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if c.pipeline.methods.is_empty() {
            return bad("pipeline.methods is empty");
        }
        if c.protocol.protocols.is_empty() {
            return bad("protocol.protocols is empty");
        }
        if c.pipeline.pseudocount < 0.0 {
            return bad("pipeline.pseudocount must be non-negative");
        }
        if c.jobs == Some(0) {
            return bad("jobs must be positive");
        }
        let d = &c.dataset;
        let sources = [d.schema.is_some() || d.csv.is_some(), d.prepared.is_some(), d.synthetic.is_some()];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return bad("dataset needs exactly one of schema+csv, prepared, or synthetic");
        }
        if (d.schema.is_some()) != (d.csv.is_some()) {
            return bad("dataset.schema and dataset.csv go together");
        }
        for kind in &c.protocol.protocols {
            self.spec(*kind, None)
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        match (flag, &self.config.out) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => self.resolve(p),
            (None, None) => self.base.join("results"),
        }
    }

    pub fn spec(&self, protocol: ProtocolKind, scale: Option<Scale>) -> ProtocolSpec {
        let p = &self.config.protocol;
        let mut spec = match scale.unwrap_or(p.scale) {
            Scale::Desk => ProtocolSpec::desk(&self.dataset_name(), protocol, self.config.seed),
            Scale::Paper => ProtocolSpec::paper(&self.dataset_name(), protocol, self.config.seed),
        };
        if let Some(n) = p.n_splits {
            spec.n_splits = n;
        }
        if let Some(n) = p.n_repeats {
            spec.n_repeats = n;
        }
        spec.sample_size = p.sample_size;
        spec.grid = p.grid.clone();
        spec
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let p = &self.config.pipeline;
        let mut estimators = p.methods.clone();
        if p.ablation {
            for e in &p.methods {
                if let Estimator::Quantifier { method, split: true } = e {
                    estimators.push(Estimator::shared(*method));
                }
            }
        }
        estimators.sort();
        estimators.dedup();
        let mut config = PipelineConfig::new(estimators);
        config.quantifier.trainer = TrainerConfig { kind: p.trainer, ..TrainerConfig::default() };
        config.classifier = TrainerConfig {
            kind: p.trainer,
            class_weighting: ClassWeighting::Balanced,
            ..TrainerConfig::default()
        };
        config.pseudocount = p.pseudocount;
        config
    }

    pub fn dataset_name(&self) -> String {
        let d = &self.config.dataset;
        if d.synthetic.is_some() {
            return "synthetic".into();
        }
        let path = d.schema.as_ref().or(d.prepared.as_ref());
        if let Some(schema) = &d.schema {
            if let Ok(s) = DatasetSchema::from_path(&self.resolve(schema)) {
                return s.name;
            }
        }
        path.and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    }

    pub fn load_data(&self) -> Result<LabeledSample, CliError> {
        let d = &self.config.dataset;
        if let Some(s) = &d.synthetic {
            let spec = SyntheticSpec::separated(s.n, s.dim, s.cell_probs, s.s_gap, s.y_gap, s.seed);
            return generate_synthetic(&spec).map_err(|e| CliError::Config(e.to_string()));
        }
        if let Some(prepared) = &d.prepared {
            let path = data_path(&self.resolve(prepared))?;
            let file = open(&path)?;
            return read_prepared(file)
                .map(|(sample, _)| sample)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())));
        }
        let schema_path = self.resolve(d.schema.as_ref().expect("validated"));
        let schema = DatasetSchema::from_path(&schema_path).map_err(|e| CliError::Config(e.to_string()))?;
        let csv = data_path(&self.resolve(d.csv.as_ref().expect("validated")))?;
        load_dataset(&schema, open(&csv)?)
            .map(|l| l.sample)
            .map_err(|e| CliError::Data(format!("{}: {e}", csv.display())))
    }
}

/// `path` if it exists, otherwise its file name under `$QF_DATA_DIR`.
pub fn data_path(path: &Path) -> Result<PathBuf, CliError> {
    if path.exists() {
        return Ok(path.to_path_buf());
    }
    let fallback = std::env::var_os("QF_DATA_DIR")
        .map(PathBuf::from)
        .zip(path.file_name().map(OsString::from))
        .map(|(dir, name)| dir.join(name));
    match fallback {
        Some(p) if p.exists() => Ok(p),
        _ => Err(CliError::Data(format!(
            "dataset file {} not found (also looked in $QF_DATA_DIR)",
            path.display()
        ))),
    }
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
