//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_blob_benchmark, load_feature_dataset, BlobStreamSpec, TaskStream};
use crate::drift::ProjectorConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_HIST_BINS;
use crate::nn::MlpSpec;
use crate::rng::SeedTree;
use crate::training::{SessionPlan, TrainConfig, TrainerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Naive,
    Sdc,
    Ldc,
    Oracle,
    Joint,
    Nme,
    FeatureBank,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Sdc => "sdc",
            Method::Ldc => "ldc",
            Method::Oracle => "oracle",
            Method::Joint => "joint",
            Method::Nme => "nme",
            Method::FeatureBank => "feature-bank",
        }
    }
}

/// Which labels the backbone trainer sees in a partially labeled stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerLabels {
    /// The trainer sees every label; only prototypes use the masked subset.
    /// Stands in for a label-free representation learner.
    #[default]
    All,
    /// The trainer only sees labeled samples.
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub class_separation: f64,
    /// Fixed data seed. When absent every run seed draws its own stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            num_tasks: 5,
            classes_per_task: 4,
            input_dim: 16,
            samples_per_class: 100,
            test_per_class: 100,
            class_separation: 4.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileStreamConfig {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StreamConfig {
    Blobs(BlobConfig),
    File(FileStreamConfig),
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig::Blobs(BlobConfig::default())
    }
}

impl StreamConfig {
    /// Train and test streams for one run seed. Relative file paths resolve
    /// against `base`.
    pub fn build(&self, seed: SeedTree, base: &Path) -> Result<(TaskStream, TaskStream)> {
        match self {
            StreamConfig::Blobs(b) => {
                let spec = BlobStreamSpec {
                    num_tasks: b.num_tasks,
                    classes_per_task: b.classes_per_task,
                    input_dim: b.input_dim,
                    samples_per_class: b.samples_per_class,
                    class_separation: b.class_separation,
                    seed: b.seed.unwrap_or(seed.child("stream").0),
                };
                generate_blob_benchmark(&spec, b.test_per_class)
            }
            StreamConfig::File(f) => {
                let train = load_feature_dataset(base.join(&f.train))?;
                let test = load_feature_dataset(base.join(&f.test))?;
                let same_split = train.num_tasks() == test.num_tasks()
                    && train.input_dim == test.input_dim
                    && train.tasks.iter().zip(&test.tasks).all(|(a, b)| a.classes == b.classes);
                if !same_split {
                    return Err(Error::data("train and test files do not share tasks, classes and dim"));
                }
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub final_relu: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            hidden: vec![64, 64],
            feature_dim: 32,
            final_relu: true,
        }
    }
}

impl ExtractorConfig {
    pub fn spec(&self, input_dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            hidden: self.hidden.clone(),
            output_dim: self.feature_dim,
            final_relu: self.final_relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Multiplies epochs and milestones of both sessions.
    pub epoch_scale: f64,
    pub first: SessionConfig,
    pub incremental: SessionConfig,
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epoch_scale: 1.0,
            first: SessionConfig {
                epochs: 200,
                lr: 0.1,
                milestones: vec![60, 120, 160],
            },
            incremental: SessionConfig {
                epochs: 100,
                lr: 0.05,
                milestones: vec![45, 90],
            },
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda: 10.0,
            temperature: 2.0,
            batch_size: 128,
        }
    }
}

impl TrainingConfig {
    fn scaled(&self, n: usize) -> usize {
        ((n as f64 * self.epoch_scale).round() as usize).max(1)
    }

    fn session(&self, s: &SessionConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.scaled(s.epochs),
            lr: s.lr,
            milestones: s.milestones.iter().map(|&m| self.scaled(m)).collect(),
            gamma: self.gamma,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            temperature: self.temperature,
            batch_size: self.batch_size,
            seed: 0,
        }
    }

    pub fn plan(&self) -> SessionPlan {
        SessionPlan {
            first: self.session(&self.first),
            incremental: self.session(&self.incremental),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdcConfig {
    pub sigma: f64,
}

impl Default for SdcConfig {
    fn default() -> Self {
        SdcConfig { sigma: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// Stored samples per class for NME.
    pub nme: usize,
    /// Stored features per class for the projected feature bank.
    pub feature_bank: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            nme: 20,
            feature_bank: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// L2-normalise features and prototypes before NCM.
    pub normalize_features: bool,
    pub hist_bins: usize,
    /// Also evaluate every task prefix (tasks 1..=k) at each boundary.
    pub prefix_report: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            normalize_features: false,
            hist_bins: DEFAULT_HIST_BINS,
            prefix_report: true,
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn default_trainer() -> TrainerKind {
    TrainerKind::Lwf
}

fn default_fraction() -> f64 {
    1.0
}

fn default_output() -> PathBuf {
    PathBuf::from("driftlab-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    #[serde(default = "default_trainer")]
    pub trainer: TrainerKind,
    #[serde(default = "default_fraction")]
    pub label_fraction: f64,
    #[serde(default)]
    pub trainer_labels: TrainerLabels,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Write a checkpoint per seed after the last task.
    #[serde(default)]
    pub checkpoint: bool,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub ldc: ProjectorConfig,
    #[serde(default)]
    pub sdc: SdcConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// 1-based line of the first `key =` assignment or `[key]` table header.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(leaf).is_some_and(|r| r.trim_start().starts_with('='))
            || l.trim_end() == format!("[{key}]")
    })
    .map(|i| i + 1)
}

fn config_err(text: Option<&str>, key: &str, msg: impl std::fmt::Display) -> Error {
    match text.and_then(|t| line_of(t, key)) {
        Some(line) => Error::Config(format!("line {line}: `{key}`: {msg}")),
        None => Error::Config(format!("`{key}` (default): {msg}")),
    }
}

impl ExperimentConfig {
    /// A small config with every default filled in.
    pub fn new(seeds: Vec<u64>, methods: Vec<Method>) -> Self {
        ExperimentConfig {
            name: default_name(),
            seeds,
            methods,
            trainer: default_trainer(),
            label_fraction: 1.0,
            trainer_labels: TrainerLabels::All,
            output_dir: default_output(),
            checkpoint: false,
            stream: StreamConfig::default(),
            extractor: ExtractorConfig::default(),
            training: TrainingConfig::default(),
            ldc: ProjectorConfig::default(),
            sdc: SdcConfig::default(),
            memory: MemoryConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let msg = e.message().to_string();
            match line {
                Some(l) => Error::Config(format!("line {l}: {msg}")),
                None => Error::Config(msg),
            }
        })?;
        cfg.check(Some(text))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.check(None)
    }

    fn check(&self, text: Option<&str>) -> Result<()> {
        let err = |key: &str, msg: &str| config_err(text, key, msg);
        if self.seeds.is_empty() {
            return Err(err("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(err("methods", "at least one compensation method is required"));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(err("methods", "methods must not repeat"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(err("label_fraction", "must lie in (0, 1]"));
        }
        if let StreamConfig::Blobs(b) = &self.stream {
            if b.input_dim < 2 {
                return Err(err("stream.input_dim", "must be ≥ 2"));
            }
            if b.num_tasks == 0 || b.classes_per_task == 0 || b.samples_per_class == 0 || b.test_per_class == 0 {
                return Err(err("stream", "task, class and sample counts must be ≥ 1"));
            }
            if !(b.class_separation > 0.0 && b.class_separation.is_finite()) {
                return Err(err("stream.class_separation", "must be positive"));
            }
        }
        if self.extractor.feature_dim == 0 || self.extractor.hidden.contains(&0) {
            return Err(err("extractor", "layer widths must be ≥ 1"));
        }
        let t = &self.training;
        if !(t.epoch_scale > 0.0 && t.epoch_scale.is_finite()) {
            return Err(err("training.epoch_scale", "must be positive"));
        }
        for (key, s) in [("training.first", &t.first), ("training.incremental", &t.incremental)] {
            if s.epochs == 0 {
                return Err(err(key, "epochs must be ≥ 1"));
            }
            if !(s.lr > 0.0) {
                return Err(err(key, "lr must be positive"));
            }
        }
        self.training.plan().first.validate().map_err(|e| err("training", &e.to_string()))?;
        self.training.plan().incremental.validate().map_err(|e| err("training", &e.to_string()))?;
        self.ldc.validate().map_err(|e| err("ldc", &e.to_string()))?;
        if !(self.sdc.sigma > 0.0 && self.sdc.sigma.is_finite()) {
            return Err(err("sdc.sigma", "must be positive"));
        }
        if self.memory.nme == 0 || self.memory.feature_bank == 0 {
            return Err(err("memory", "capacities must be ≥ 1"));
        }
        if self.analysis.hist_bins == 0 {
            return Err(err("analysis.hist_bins", "must be ≥ 1"));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML, ignoring the
    /// output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = c.to_toml().unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }
}
