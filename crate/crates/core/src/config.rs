//! Run configuration: a JSON document validated before any work starts.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::data::{default_val_size, load_cifar_binary, load_idx, synth_dataset, Dataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::nn::ArchSpec;
use crate::train::{AttachConfig, PipelineSpec, TrainPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Idx,
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Generator settings (`synth`); the last `test_size` samples form the
    /// test set.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub cifar_train: Vec<PathBuf>,
    #[serde(default)]
    pub cifar_test: Vec<PathBuf>,
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Keep only the first `train_size` training samples.
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub test_size: Option<usize>,
    /// Validation slice taken from the front of the test set.
    #[serde(default)]
    pub val_size: Option<usize>,
}

/// Training, validation and test sets of a run.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn truncate(ds: Dataset, n: Option<usize>, split: Split) -> Result<Dataset> {
    match n {
        Some(n) if n < ds.len() => ds.subset(0, n, split),
        _ => Ok(ds.with_split(split)),
    }
}

impl DataConfig {
    pub fn from_json(text: &str) -> Result<DataConfig> {
        let cfg: DataConfig = parse_json(text)?;
        if let Some(s) = &cfg.synth {
            at("synth".into(), s.validate())?;
        }
        Ok(cfg)
    }

    fn num_classes(&self) -> usize {
        self.num_classes.unwrap_or(10)
    }

    pub fn load(&self) -> Result<Splits> {
        let (train, test) = match self.source {
            DataSource::Synth => {
                let spec = self.synth.as_ref().ok_or_else(|| config_err("data.synth", "missing for source synth"))?;
                let all = synth_dataset(spec)?;
                let test_n = self.test_size.unwrap_or(all.len() / 5);
                let (train, test) = all.split_tail(test_n, Split::Test)?;
                (train, test)
            }
            DataSource::Idx => {
                let need = |p: &Option<PathBuf>, key: &str| {
                    p.clone().ok_or_else(|| config_err(&format!("data.{key}"), "missing for source idx"))
                };
                let train = load_idx(
                    &need(&self.train_images, "train_images")?,
                    &need(&self.train_labels, "train_labels")?,
                    self.num_classes(),
                )?;
                let test = load_idx(
                    &need(&self.test_images, "test_images")?,
                    &need(&self.test_labels, "test_labels")?,
                    self.num_classes(),
                )?;
                (train, test)
            }
            DataSource::Cifar => {
                if self.cifar_train.is_empty() || self.cifar_test.is_empty() {
                    return Err(config_err("data.cifar_train", "cifar source needs train and test files"));
                }
                (
                    load_cifar_binary(&self.cifar_train, self.num_classes())?,
                    load_cifar_binary(&self.cifar_test, self.num_classes())?,
                )
            }
        };
        let train = truncate(train, self.train_size, Split::Train)?;
        let test = truncate(test, self.test_size, Split::Test)?;
        let val_n = self.val_size.unwrap_or_else(|| default_val_size(test.len())).min(test.len());
        let val = test.subset(0, val_n, Split::Val)?;
        Ok(Splits { train, val, test })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub arch: ArchSpec,
    #[serde(default)]
    pub attach: AttachConfig,
    pub stages: Vec<TrainPlan>,
    #[serde(default)]
    pub eval: Vec<AttackConfig>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Pre-trained single-head checkpoint replacing stage-1 training.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
}

fn config_err(path: &str, message: &str) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.to_string(),
    }
}

fn at<T>(path: String, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::Config {
            path,
            message: other.to_string(),
        },
    })
}

impl RunConfig {
    /// Parses and validates; errors carry the JSON path of the offending key.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        at("arch".into(), self.arch.validate())?;
        if let Some(s) = &self.attach.second_arch {
            at("attach.second_arch".into(), s.validate())?;
        }
        if self.stages.is_empty() {
            return Err(config_err("stages", "at least one stage is required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            at(format!("stages[{i}]"), s.validate())?;
        }
        for (i, a) in self.eval.iter().enumerate() {
            at(format!("eval[{i}]"), a.validate())?;
        }
        if let Some(s) = &self.data.synth {
            at("data.synth".into(), s.validate())?;
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineSpec {
        PipelineSpec {
            arch: self.arch.clone(),
            attach: self.attach.clone(),
            stages: self.stages.clone(),
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        digest_bytes(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Deserializes `text`, reporting failures as [`Error::Config`] with the
/// path of the offending key (a missing field's own name included).
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let mut path = e.path().to_string();
        let message = e.inner().to_string();
        if let Some(field) = message
            .strip_prefix("missing field `")
            .and_then(|r| r.split('`').next())
        {
            path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
        }
        Error::Config { path, message }
    })
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
