//! Run configuration: one TOML document with a section per stage.
//!
//! ```toml
//! seeds = [1, 2, 3, 4, 5]
//!
//! [encoder]
//! vocab_size = 4096
//!
//! [detector]
//! lambda_train = 5.0
//! lambda_query = 2.0
//! [detector.meta]
//! inner_steps = 2
//! [detector.finetune]
//! steps = 30
//!
//! [typer]
//! distance = "squared_euclidean"
//! [typer.finetune]
//! steps = 20
//! ```
//!
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{DEFAULT_LAMBDA_QUERY, DEFAULT_LAMBDA_TRAIN};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::maml::{optimizer_config, MetaConfig};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::typing::{Distance, TypingOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
}

impl FineTuneConfig {
    pub fn optimizer_config(&self) -> OptimizerConfig {
        optimizer_config(self.optimizer, self.lr, self.weight_decay, self.warmup_fraction)
    }

    fn validate(&self, stage: &str) -> Result<()> {
        self.optimizer_config()
            .validate()
            .map_err(|e| e.context(format!("{stage}.finetune")))
    }
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            steps: 30,
            lr: 1e-2,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.01,
            warmup_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorStage {
    pub lambda_train: f64,
    pub lambda_query: f64,
    pub meta: MetaConfig,
    pub finetune: FineTuneConfig,
}

impl Default for DetectorStage {
    fn default() -> Self {
        DetectorStage {
            lambda_train: DEFAULT_LAMBDA_TRAIN,
            lambda_query: DEFAULT_LAMBDA_QUERY,
            meta: MetaConfig::default(),
            finetune: FineTuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TyperStage {
    pub distance: Distance,
    pub leave_one_out: bool,
    /// Drop typed spans whose nearest-prototype similarity (−distance) is
    /// not above this value. Disabled when absent.
    pub min_similarity: Option<f64>,
    pub meta: MetaConfig,
    pub finetune: FineTuneConfig,
}

impl Default for TyperStage {
    fn default() -> Self {
        TyperStage {
            distance: Distance::SquaredEuclidean,
            leave_one_out: false,
            min_similarity: None,
            meta: MetaConfig::default(),
            finetune: FineTuneConfig {
                steps: 20,
                ..FineTuneConfig::default()
            },
        }
    }
}

impl TyperStage {
    pub fn typing_options(&self) -> TypingOptions {
        TypingOptions {
            distance: self.distance,
            leave_one_out: self.leave_one_out,
            min_similarity: self.min_similarity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalProtocol {
    PooledMicro,
    PerEpisodeMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: String,
    pub strict: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            dev: None,
            test: None,
            format: "canonical".into(),
            strict: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub protocol: EvalProtocol,
    /// Worker threads for evaluation; 1 runs sequentially.
    pub threads: usize,
    pub lowercase: bool,
    pub encoder: EncoderConfig,
    pub detector: DetectorStage,
    pub typer: TyperStage,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![1, 2, 3, 4, 5],
            protocol: EvalProtocol::PooledMicro,
            threads: 1,
            lowercase: false,
            encoder: EncoderConfig::default(),
            detector: DetectorStage::default(),
            typer: TyperStage::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        for (name, l) in [
            ("detector.lambda_train", self.detector.lambda_train),
            ("detector.lambda_query", self.detector.lambda_query),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        self.detector.meta.validate().map_err(|e| e.context("detector.meta"))?;
        self.typer.meta.validate().map_err(|e| e.context("typer.meta"))?;
        self.detector.finetune.validate("detector")?;
        self.typer.finetune.validate("typer")?;
        if let Some(t) = self.typer.min_similarity {
            if !t.is_finite() {
                return Err(Error::Config("typer.min_similarity must be finite".into()));
            }
        }
        self.data.format.parse::<crate::episode_io::EpisodeFormat>()?;
        Ok(())
    }
}
