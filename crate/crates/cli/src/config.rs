//! Resolved run configurations. Every command writes one as `config.toml`
//! next to its outputs; passing it back with `--config` repeats the run.

use std::fs;
use std::path::{Path, PathBuf};

use ofnet::eval::EvalConfig;
use ofnet::model::ModelVariant;
use ofnet::synth::SceneSpec;
use ofnet::train::TrainConfig;
use ofnet::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub seed: u64,
    pub count: usize,
    /// Prefix of sample ids.
    pub prefix: String,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub dataset: PathBuf,
    /// Seed of parameter initialisation; also seeds batch sampling.
    pub seed: u64,
    pub variant: String,
    pub model: ModelVariant,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub checkpoint: PathBuf,
    /// Dataset directory whose manifest lists the images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Individual PNG files; the id is the file stem.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub predictions: PathBuf,
    pub dataset: PathBuf,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotConfig {
    pub reports: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    /// Seed of the synthetic split; ignored when both directories are given.
    pub data_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_dataset: Option<PathBuf>,
    pub train_count: usize,
    pub test_count: usize,
    pub size: usize,
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    pub model: ModelVariant,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    GenData(GenDataConfig),
    Train(TrainRunConfig),
    Infer(InferConfig),
    Eval(EvalRunConfig),
    Plot(PlotConfig),
    Ablate(AblateConfig),
}

impl RunConfig {
    pub fn command(&self) -> &'static str {
        match self {
            RunConfig::GenData(_) => "gen-data",
            RunConfig::Train(_) => "train",
            RunConfig::Infer(_) => "infer",
            RunConfig::Eval(_) => "eval",
            RunConfig::Plot(_) => "plot",
            RunConfig::Ablate(_) => "ablate",
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Usage(format!("cannot serialise the run configuration: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Usage(format!("invalid run configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::Io { path, source: e })
    }
}
