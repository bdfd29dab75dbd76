//! Run configuration: search hyperparameters, data source, fine-tuning schedule, seeds
//! and report options, loaded from TOML on top of a named profile.

use std::path::{Path, PathBuf};

use ecae::data::{load_images, split, synth_dataset, ImageSet, SynthKind};
use ecae::evolution::{EvoConfig, FinetuneConfig};
use ecae::seed::{derive, stream};
use ecae::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-scale search (hours to days of compute).
    #[default]
    Full,
    /// Minutes-scale search on small synthetic images.
    Desk,
}

impl Profile {
    pub fn evolution(self) -> EvoConfig {
        match self {
            Profile::Full => EvoConfig::full(),
            Profile::Desk => EvoConfig::desk(),
        }
    }

    pub fn finetune(self) -> FinetuneConfig {
        match self {
            Profile::Full => FinetuneConfig::default(),
            Profile::Desk => FinetuneConfig::scaled(2_000),
        }
    }

    pub fn data(self) -> DataConfig {
        let count = match self {
            Profile::Full => 2_000,
            Profile::Desk => 200,
        };
        DataConfig {
            source: DataSource::Synthetic {
                kind: SynthKind::Digits,
                count,
                size: None,
            },
            split: [0.8, 0.1, 0.1],
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Procedurally generated images; `size` defaults to the network input size.
    Synthetic {
        kind: SynthKind,
        count: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        size: Option<usize>,
    },
    /// Every PNG/PNM image in a directory, relative paths taken from the config file.
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
}

pub struct Splits {
    pub train: ImageSet,
    pub val: ImageSet,
    pub test: ImageSet,
}

impl DataConfig {
    pub fn load(&self, evo: &EvoConfig) -> Result<Splits> {
        let all = match &self.source {
            DataSource::Synthetic { kind, count, size } => synth_dataset(
                *kind,
                *count,
                size.unwrap_or(evo.input_size),
                evo.input_channels,
                self.split_seed,
            )?,
            DataSource::Directory { path } => load_images(path, evo.input_channels)?,
        };
        let (train, val, test) = split(&all, self.split, derive(self.split_seed, &[stream::SPLIT]))?;
        Ok(Splits { train, val, test })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub plot_width: u32,
    pub plot_height: u32,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            plot_width: 720,
            plot_height: 420,
        }
    }
}

/// Fully resolved configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub evolution: EvoConfig,
    pub data: DataConfig,
    pub finetune: FinetuneConfig,
    pub report: ReportOptions,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    profile: Option<Profile>,
    seeds: Option<Vec<u64>>,
    out_dir: Option<PathBuf>,
    evolution: Option<toml::Table>,
    data: Option<DataConfig>,
    finetune: Option<toml::Table>,
    report: Option<ReportOptions>,
}

fn config_err(message: impl std::fmt::Display) -> Error {
    Error::Config(message.to_string())
}

/// Overlays `overrides` on the serialized `base` and deserializes the result.
fn merge<T: Serialize + for<'de> Deserialize<'de>>(base: &T, overrides: Option<toml::Table>, what: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(config_err)?;
    for (k, v) in overrides.unwrap_or_default() {
        table.insert(k, v);
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| config_err(format!("[{what}] {e}")))
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            seeds: vec![0],
            out_dir: None,
            evolution: profile.evolution(),
            data: profile.data(),
            finetune: profile.finetune(),
            report: ReportOptions::default(),
        }
    }

    /// Parses TOML text. `profile` takes precedence over a profile named in the text;
    /// relative data paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, profile: Option<Profile>, base_dir: &Path) -> Result<Self> {
        let raw: RawRunConfig = toml::from_str(text).map_err(config_err)?;
        let profile = profile.or(raw.profile).unwrap_or_default();
        let defaults = Self::for_profile(profile);
        let mut data = raw.data.unwrap_or(defaults.data);
        if let DataSource::Directory { path } = &mut data.source {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        let cfg = Self {
            profile,
            seeds: raw.seeds.unwrap_or(defaults.seeds),
            out_dir: raw.out_dir,
            evolution: merge(&defaults.evolution, raw.evolution, "evolution")?,
            data,
            finetune: merge(&defaults.finetune, raw.finetune, "finetune")?,
            report: raw.report.unwrap_or_default(),
        };
        Ok(cfg)
    }

    /// Loads `path`, or the profile defaults when no file is given.
    pub fn load(path: Option<&Path>, profile: Option<Profile>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text, profile, p.parent().unwrap_or(Path::new(".")))
            }
            None => Ok(Self::for_profile(profile.unwrap_or_default())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.evolution.validate()?;
        if self.seeds.is_empty() {
            return Err(config_err("at least one seed is required"));
        }
        if self.finetune.milestones.windows(2).any(|w| w[0] > w[1]) {
            return Err(config_err("finetune milestones must be increasing"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
