//! CIFAR-10 binary batches, normalization, batching and synthetic sets.

use std::path::{Path, PathBuf};

use pcn_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{CIFAR_CHANNELS, CIFAR_CLASSES, CIFAR_SIZE};
use crate::error::{Error, IoContext, Result};

pub const CIFAR_PIXELS: usize = CIFAR_CHANNELS * CIFAR_SIZE * CIFAR_SIZE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images stored `N x C x S x S`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<u8>,
        split: Split,
        channels: usize,
        size: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let per = channels * size * size;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} image values for {} labels of {per} values each",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { images, labels, split, channels, size, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Gathers `indices` into a `[B, C, S, S]` tensor.
    pub fn batch_tensor<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::cast(v as f64)));
        }
        Ok(Tensor::new(&[indices.len(), self.channels, self.size, self.size], data)?)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }
}

/// Reads CIFAR-10 binary batch files. Each record is one label byte followed
/// by 3072 planar RGB bytes; pixels are scaled to `[0, 1]`.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Data("no CIFAR-10 files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path).at(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                path.display(),
                bytes.len()
            )));
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = record[0];
            if label as usize >= CIFAR_CLASSES {
                return Err(Error::Data(format!("{}: record {r} has label {label}", path.display())));
            }
            labels.push(label);
            images.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Dataset::new(images, labels, split, CIFAR_CHANNELS, CIFAR_SIZE, CIFAR_CLASSES)
}

/// Writes a dataset of unnormalized `[0, 1]` CIFAR-shaped images in the
/// binary batch layout.
pub fn write_cifar10_binary(path: &Path, data: &Dataset) -> Result<()> {
    if data.channels != CIFAR_CHANNELS || data.size != CIFAR_SIZE {
        return Err(Error::Data("only 3x32x32 images fit the CIFAR-10 layout".into()));
    }
    let mut bytes = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        bytes.push(data.labels[i]);
        for &v in data.image(i) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
            }
            bytes.push((v * 255.0).round() as u8);
        }
    }
    std::fs::write(path, bytes).at(path)
}

/// Standard file names of the binary distribution inside `dir`.
pub fn cifar10_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationSpec {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Per-channel mean and population standard deviation.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("cannot compute statistics of an empty dataset".into()));
        }
        let plane = data.size * data.size;
        let count = (data.len() * plane) as f64;
        let mut sum = vec![0.0; data.channels];
        let mut sq = vec![0.0; data.channels];
        for i in 0..data.len() {
            for (c, chunk) in data.image(i).chunks(plane).enumerate() {
                for &v in chunk {
                    sum[c] += v as f64;
                    sq[c] += (v as f64).powi(2);
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / count - m * m).max(0.0).sqrt()).collect();
        let spec = Self { mean, std };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Config("normalization mean and std differ in length".into()));
        }
        if let Some(s) = self.std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("normalization std {s} must be positive")));
        }
        Ok(())
    }
}

/// `(x - mean[c]) / std[c]` on every pixel.
pub fn normalize(data: &Dataset, spec: &NormalizationSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.mean.len() != data.channels {
        return Err(Error::Config(format!(
            "normalization has {} channels, data has {}",
            spec.mean.len(),
            data.channels
        )));
    }
    let plane = data.size * data.size;
    let mut out = data.clone();
    for (j, v) in out.images.iter_mut().enumerate() {
        let c = (j / plane) % data.channels;
        *v = ((*v as f64 - spec.mean[c]) / spec.std[c]) as f32;
    }
    Ok(out)
}

/// Index batches covering `0..len` once, the last one possibly short.
pub fn batches(len: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Balanced CIFAR-shaped synthetic training set, see [`synthetic_set`].
pub fn synthetic_classification_set(n: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    synthetic_set(n, num_classes, CIFAR_CHANNELS, CIFAR_SIZE, seed, Split::Train)
}

/// Sample `i` has label `i % num_classes`. Every class owns a colour and a
/// Gaussian blob at its own position; samples add pixel noise and are
/// clipped to `[0, 1]`. Both splits of one seed share the class templates
/// and draw independent noise.
pub fn synthetic_set(
    n: usize,
    num_classes: usize,
    channels: usize,
    size: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if num_classes == 0 || num_classes > u8::MAX as usize + 1 {
        return Err(Error::Config(format!("unsupported class count {num_classes}")));
    }
    if n < num_classes {
        return Err(Error::Config(format!("{n} samples cannot cover {num_classes} classes")));
    }
    if channels == 0 || size == 0 {
        return Err(Error::Config("synthetic images need at least one channel and pixel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let sigma = size as f64 / 6.0;
    let templates: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let colour: Vec<f64> = (0..channels).map(|_| rng.random_range(0.15..0.85)).collect();
            let cy = rng.random_range(0.0..size as f64);
            let cx = rng.random_range(0.0..size as f64);
            let blob_channel = rng.random_range(0..channels);
            let mut img = vec![0.0; channels * plane];
            for c in 0..channels {
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let bump = if c == blob_channel { 0.5 * (-d2 / (2.0 * sigma * sigma)).exp() } else { 0.0 };
                        img[c * plane + y * size + x] = 0.5 * colour[c] + bump;
                    }
                }
            }
            img
        })
        .collect();
    let noise = Normal::new(0.0, 0.08).expect("valid normal");
    if split == Split::Test {
        rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_7e57_7e57_7e57);
    }
    let mut images = Vec::with_capacity(n * channels * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % num_classes;
        labels.push(k as u8);
        images.extend(templates[k].iter().map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32));
    }
    Dataset::new(images, labels, split, channels, size, num_classes)
}
