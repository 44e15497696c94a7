use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::RetrainConfig;
use crate::benchmark::BenchmarkConfig;
use crate::enhancer::{EnhancerTrainConfig, UNetConfig};
use crate::error::{Error, Result};
use crate::evaluation::Baseline;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    TrainIsp,
    TrainEnhancer,
    EvalAfr,
    EvalUtility,
    EvalIqa,
    Attack,
    Sweep,
    ExportParams,
    Preliminary,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 10] = [
        ExperimentKind::Simulate,
        ExperimentKind::TrainIsp,
        ExperimentKind::TrainEnhancer,
        ExperimentKind::EvalAfr,
        ExperimentKind::EvalUtility,
        ExperimentKind::EvalIqa,
        ExperimentKind::Attack,
        ExperimentKind::Sweep,
        ExperimentKind::ExportParams,
        ExperimentKind::Preliminary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::TrainIsp => "train-isp",
            ExperimentKind::TrainEnhancer => "train-enhancer",
            ExperimentKind::EvalAfr => "eval-afr",
            ExperimentKind::EvalUtility => "eval-utility",
            ExperimentKind::EvalIqa => "eval-iqa",
            ExperimentKind::Attack => "attack",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::ExportParams => "export-params",
            ExperimentKind::Preliminary => "preliminary",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which models play the extractor and detector roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    #[default]
    Tiny,
}

/// Corpus and artifact locations. Missing corpora fall back to the
/// synthetic generator; a missing parameter file means the identity camera.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Identity-named subdirectories or a `path,identity` manifest.
    pub faces: Option<PathBuf>,
    pub faces_test: Option<PathBuf>,
    /// `path,cx,cy,w,h,...` manifest.
    pub detection: Option<PathBuf>,
    pub detection_test: Option<PathBuf>,
    /// ISP parameter file.
    pub params: Option<PathBuf>,
    /// Detector weights finetuned with the parameters (from `train-isp`).
    pub detector: Option<PathBuf>,
    /// Image directories compared file-by-file by `eval-iqa`.
    pub test_images: Option<PathBuf>,
    pub reference_images: Option<PathBuf>,
}

impl DataConfig {
    fn paths_mut(&mut self) -> [(&'static str, &mut Option<PathBuf>); 8] {
        [
            ("data.faces", &mut self.faces),
            ("data.faces_test", &mut self.faces_test),
            ("data.detection", &mut self.detection),
            ("data.detection_test", &mut self.detection_test),
            ("data.params", &mut self.params),
            ("data.detector", &mut self.detector),
            ("data.test_images", &mut self.test_images),
            ("data.reference_images", &mut self.reference_images),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub baselines: Vec<Baseline>,
    /// Utility weights for adversarially trained cameras (each is a full
    /// training run).
    pub omegas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            baselines: Baseline::ladder(),
            omegas: Vec::new(),
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Master seed; every nested seed is derived from it.
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub model: ModelChoice,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub retrain: RetrainConfig,
    #[serde(default)]
    pub enhancer: EnhancerTrainConfig,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { key, message } => Error::Config {
            key: format!("{prefix}.{key}"),
            message,
        },
        other => other,
    }
}

impl ExperimentConfig {
    /// Derives nested seeds from the master seed.
    fn propagate_seed(&mut self) {
        let s = self.seed;
        self.benchmark.seed = s;
        self.benchmark.faces.seed = s;
        self.benchmark.train_scenes.seed = s.wrapping_mul(2);
        self.benchmark.test_scenes.seed = s.wrapping_mul(2).wrapping_add(1);
        self.benchmark.extractor_training.seed = s;
        self.benchmark.detector_training.seed = s;
        self.benchmark.detector_finetune.seed = s;
        self.benchmark.protocol.seed = s;
        self.train.seed = s;
        self.retrain.seed = s;
        self.enhancer.seed = s;
    }

    /// Invariant checks; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| prefixed("train", e))?;
        self.retrain.validate().map_err(|e| prefixed("retrain", e))?;
        if self.benchmark.protocol.runs == 0 {
            return Err(Error::config("benchmark.protocol.runs", "must be at least 1"));
        }
        if self.enhancer.batch_size == 0 {
            return Err(Error::config("enhancer.batch_size", "must be at least 1"));
        }
        for (i, w) in self.sweep.omegas.iter().enumerate() {
            if !(*w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("sweep.omegas[{i}]"), "must be >= 0"));
            }
        }
        if self.kind == ExperimentKind::EvalIqa
            && self.data.test_images.is_some() != self.data.reference_images.is_some()
        {
            return Err(Error::config(
                "data.reference_images",
                "test_images and reference_images must be given together",
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("config serialization: {e}")))
    }
}

/// Parses `key=value`; the value is read as a TOML value and falls back to
/// a plain string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must have the form key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let out: PathBuf = joined
        .components()
        .filter(|c| !matches!(c, std::path::Component::CurDir))
        .collect();
    if out.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        out
    }
}

/// Parses config text, applies overrides, fills defaults, resolves relative
/// paths against `base` and checks invariants.
pub fn parse_config(text: &str, base: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
        location: base.display().to_string(),
        message: e.to_string(),
    })?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut config: ExperimentConfig =
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Parse {
            location: base.display().to_string(),
            message: e.message().to_string(),
        })?;
    config.propagate_seed();
    config.output = resolve_path(base, &config.output);
    for (key, slot) in config.data.paths_mut() {
        if let Some(p) = slot.as_mut() {
            *p = resolve_path(base, p);
            if !p.exists() {
                return Err(Error::config(key, format!("path does not exist: {}", p.display())));
            }
        }
    }
    config.validate()?;
    Ok(config)
}

/// Reads and resolves an experiment file; relative paths are taken from the
/// file's directory. The resolved configuration, defaults included, is
/// logged.
pub fn validate_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
    let config = parse_config(&text, base, overrides).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            location: path.display().to_string(),
            message,
        },
        other => other,
    })?;
    log::info!("resolved configuration:\n{}", config.to_toml()?);
    Ok(config)
}
