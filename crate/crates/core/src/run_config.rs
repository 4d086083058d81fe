//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! preset = "A"            # A, B, C or custom (with `channels`)
//! channel_divisor = 4
//! input_size = 32
//! max_cycles = 3
//!
//! [train]
//! epochs = 20
//! batch_size = 64
//! mode = "joint"          # or { fixed_cycle = 3 }
//!
//! [data]
//! source = "synthetic"    # or "cifar10" with `dir`
//! synthetic_train = 200
//! normalize = "train"     # or "none"
//!
//! [output]
//! dir = "runs/toy"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ModelId, CIFAR_CHANNELS, CIFAR_CLASSES, CIFAR_SIZE, DEFAULT_CYCLES};
use crate::data::{cifar10_files, load_cifar10_binary, normalize, synthetic_set, Dataset, NormalizationSpec, Split};
use crate::error::{Error, IoContext, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub channels: Option<Vec<usize>>,
    pub channel_divisor: usize,
    pub input_size: usize,
    pub max_cycles: usize,
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "A".into(),
            channels: None,
            channel_divisor: 1,
            input_size: CIFAR_SIZE,
            max_cycles: DEFAULT_CYCLES,
            num_classes: CIFAR_CLASSES,
        }
    }
}

impl ModelSection {
    pub fn build(&self) -> Result<ModelConfig> {
        let id: ModelId = self.preset.parse()?;
        if self.channel_divisor == 0 {
            return Err(Error::Config("channel_divisor must be at least 1".into()));
        }
        let channels: Vec<usize> = match (id, &self.channels) {
            (ModelId::Custom, Some(c)) => c.clone(),
            (ModelId::Custom, None) => return Err(Error::Config("a custom model needs `channels`".into())),
            (_, Some(_)) => return Err(Error::Config("`channels` is only valid with preset = \"custom\"".into())),
            (_, None) => id.channels().expect("preset has channels").to_vec(),
        };
        let scaled: Vec<usize> = channels.iter().map(|c| (c / self.channel_divisor).max(1)).collect();
        let id = if self.channel_divisor == 1 && self.input_size == CIFAR_SIZE && self.num_classes == CIFAR_CLASSES {
            id
        } else {
            ModelId::Custom
        };
        ModelConfig::from_channels(id, CIFAR_CHANNELS, self.input_size, &scaled, self.num_classes, self.max_cycles)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    /// Per-channel statistics of the training split.
    Train,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    pub dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub normalize: Normalize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            dir: None,
            train_limit: None,
            test_limit: None,
            synthetic_train: 500,
            synthetic_test: 200,
            normalize: Normalize::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

/// Normalized splits plus the statistics used.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub normalization: NormalizationSpec,
}

impl RunConfig {
    /// Parses and validates. The top-level seed replaces `train.seed`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.build()
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_config()?;
        self.train.validate(model.max_cycles)?;
        match self.data.source {
            DataSource::Cifar10 => {
                if model.input_size != CIFAR_SIZE || model.num_classes != CIFAR_CLASSES {
                    return Err(Error::Config("CIFAR-10 needs input_size = 32 and 10 classes".into()));
                }
                let dir = self
                    .data
                    .dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.source = \"cifar10\" needs data.dir".into()))?;
                for f in cifar10_files(dir, Split::Train).iter().chain(&cifar10_files(dir, Split::Test)) {
                    if !f.is_file() {
                        return Err(Error::Config(format!("dataset file {} does not exist", f.display())));
                    }
                }
            }
            DataSource::Synthetic => {
                if self.data.synthetic_train < model.num_classes {
                    return Err(Error::Config("synthetic_train must cover every class".into()));
                }
                if self.data.synthetic_test != 0 && self.data.synthetic_test < model.num_classes {
                    return Err(Error::Config("synthetic_test must be 0 or cover every class".into()));
                }
            }
        }
        Ok(())
    }

    /// Raw `[0, 1]` splits after truncation; the test split may be absent.
    pub fn load_raw(&self) -> Result<(Dataset, Option<Dataset>)> {
        let model = self.model_config()?;
        match self.data.source {
            DataSource::Cifar10 => {
                let dir = self.data.dir.as_ref().ok_or_else(|| Error::Config("missing data.dir".into()))?;
                let mut train = load_cifar10_binary(&cifar10_files(dir, Split::Train), Split::Train)?;
                let mut test = load_cifar10_binary(&cifar10_files(dir, Split::Test), Split::Test)?;
                if let Some(n) = self.data.train_limit {
                    train = train.truncated(n);
                }
                if let Some(n) = self.data.test_limit {
                    test = test.truncated(n);
                }
                Ok((train, Some(test)))
            }
            DataSource::Synthetic => {
                let gen = |n, split| {
                    synthetic_set(n, model.num_classes, model.input_channels, model.input_size, self.seed, split)
                };
                let train = gen(self.data.synthetic_train, Split::Train)?;
                let test = match self.data.synthetic_test {
                    0 => None,
                    n => Some(gen(n, Split::Test)?),
                };
                Ok((train, test))
            }
        }
    }

    /// Loads both splits and normalizes them with training-split statistics
    /// (or not at all, per `data.normalize`).
    pub fn load_data(&self) -> Result<PreparedData> {
        let (train, test) = self.load_raw()?;
        let normalization = match self.data.normalize {
            Normalize::Train => NormalizationSpec::from_dataset(&train)?,
            Normalize::None => NormalizationSpec::identity(train.channels),
        };
        let train = normalize(&train, &normalization)?;
        let test = test.map(|t| normalize(&t, &normalization)).transpose()?;
        Ok(PreparedData { train, test, normalization })
    }

    /// The held-out split (the training split when there is none),
    /// normalized with `spec`.
    pub fn load_eval_split(&self, spec: &NormalizationSpec) -> Result<Dataset> {
        let (train, test) = self.load_raw()?;
        normalize(&test.unwrap_or(train), spec)
    }
}
