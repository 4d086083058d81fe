//! Model descriptions: layer channel plans, pooling sites and presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_SIZE: usize = 32;
pub const DEFAULT_CYCLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelId {
    A,
    B,
    C,
    Custom,
}

impl ModelId {
    pub fn channels(self) -> Option<&'static [usize]> {
        match self {
            ModelId::A => Some(&[16, 32, 32, 64, 64]),
            ModelId::B => Some(&[32, 64, 64, 128, 128]),
            ModelId::C => Some(&[16, 32, 32, 64, 64, 128, 128]),
            ModelId::Custom => None,
        }
    }
}

impl std::str::FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(ModelId::A),
            "B" => Ok(ModelId::B),
            "C" => Ok(ModelId::C),
            "CUSTOM" => Ok(ModelId::Custom),
            other => Err(Error::Config(format!("unknown model preset {other:?} (expected A, B, C or custom)"))),
        }
    }
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelId::A => "A",
            ModelId::B => "B",
            ModelId::C => "C",
            ModelId::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// One convolutional block. `pool_after` puts a 2x2 max-pool after the
/// block's batchnorm and makes the matching feedback deconvolution stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub pool_after: bool,
}

impl LayerSpec {
    /// Pooling rule: layer `index` (1-based) pools when it changes the channel
    /// count of a previous convolutional layer. The input layer never pools.
    pub fn new(index: usize, in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, pool_after: index >= 2 && in_channels != out_channels }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: ModelId,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub max_cycles: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

impl ModelConfig {
    /// Preset A, B or C on 3x32x32 inputs with 10 classes.
    pub fn preset(id: ModelId, max_cycles: usize) -> Result<Self> {
        let channels = id
            .channels()
            .ok_or_else(|| Error::Config("the custom model has no preset channel plan".into()))?;
        Self::from_channels(id, CIFAR_CHANNELS, CIFAR_SIZE, channels, CIFAR_CLASSES, max_cycles)
    }

    pub fn from_channels(
        model_id: ModelId,
        input_channels: usize,
        input_size: usize,
        channels: &[usize],
        num_classes: usize,
        max_cycles: usize,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(channels.len());
        let mut prev = input_channels;
        for (i, &c) in channels.iter().enumerate() {
            layers.push(LayerSpec::new(i + 1, prev, c));
            prev = c;
        }
        let cfg = Self { model_id, layers, num_classes, max_cycles, input_channels, input_size };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same topology with every channel count divided by `divisor` (at least
    /// one channel) on a different input size.
    pub fn shrunk(&self, divisor: usize, input_size: usize) -> Result<Self> {
        let channels: Vec<usize> =
            self.layers.iter().map(|l| (l.out_channels / divisor).max(1)).collect();
        Self::from_channels(
            ModelId::Custom,
            self.input_channels,
            input_size,
            &channels,
            self.num_classes,
            self.max_cycles,
        )
    }

    pub fn with_cycles(&self, max_cycles: usize) -> Result<Self> {
        let cfg = Self { max_cycles, ..self.clone() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.layers.is_empty() {
            return err("model needs at least one layer".into());
        }
        if self.max_cycles == 0 {
            return err("max_cycles must be positive".into());
        }
        if self.num_classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return err("input must have positive channels and size".into());
        }
        if matches!(self.model_id, ModelId::A | ModelId::B | ModelId::C) {
            let expected = self.model_id.channels().unwrap_or_default();
            let got: Vec<usize> = self.layers.iter().map(|l| l.out_channels).collect();
            if got != expected || self.input_channels != CIFAR_CHANNELS {
                return err(format!("preset {} must use channels {:?} on 3-channel input", self.model_id, expected));
            }
        }
        let mut prev = self.input_channels;
        let mut size = self.input_size;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != prev || l.out_channels == 0 {
                return err(format!("layer {} expects {} input channels, previous layer gives {}", i + 1, l.in_channels, prev));
            }
            if *l != LayerSpec::new(i + 1, l.in_channels, l.out_channels) {
                return err(format!("layer {} pool flag breaks the channel-change pooling rule", i + 1));
            }
            if l.pool_after {
                if !size.is_multiple_of(2) {
                    return err(format!("layer {} pools an odd spatial size {}", i + 1, size));
                }
                size /= 2;
            }
            prev = l.out_channels;
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Output spatial size of every layer; entry 0 is the image size.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut out = vec![self.input_size];
        let mut s = self.input_size;
        for l in &self.layers {
            if l.pool_after {
                s /= 2;
            }
            out.push(s);
        }
        out
    }

    /// Channels of layer `l`, `l = 0` being the image.
    pub fn channels(&self, l: usize) -> usize {
        if l == 0 {
            self.input_channels
        } else {
            self.layers[l - 1].out_channels
        }
    }

    /// Length of the pooled top-layer feature vector fed to the exit heads.
    pub fn feature_len(&self) -> usize {
        self.channels(self.num_layers())
    }

    /// Stable SHA-256 of the canonical JSON form, used to tag outputs.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}
