//! Run configuration: a TOML file mirroring the training settings plus
//! paths and module overrides. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::SynthProfile;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub hw: usize,
    pub t: usize,
    pub files: usize,
    pub city: String,
    pub profile: SynthProfile,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 42, hw: 32, t: 48, files: 1, city: "synth".into(), profile: SynthProfile::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub road_map: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub split: SplitName,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// The file at `path`, or defaults when `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let m = &self.metrics;
        if !(m.tau >= 0.0 && m.theta_act >= 0.0 && m.minutes_per_frame > 0) {
            return Err(Error::Config(format!("invalid metric settings {m:?}")));
        }
        Ok(())
    }

    /// Writes the resolved configuration next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("resolved_config.toml"), self.to_toml()?)?;
        Ok(())
    }
}
