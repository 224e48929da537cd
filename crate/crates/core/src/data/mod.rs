//! Datasets, file formats, synthetic generators and corruptions.

mod corrupt;
mod csv;
mod idx;
mod synth;

pub use corrupt::{augment_with_noise, corrupt, corrupt_with_param, CorruptionKind, CorruptionSpec};
pub use csv::{load_csv, parse_csv_dataset, save_csv, to_csv_string};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, save_idx, IdxImages, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_blobs, synth_glyphs, uniform_noise_images, GlyphConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Interleaved (height, width, channel) pixels.
    Image { height: usize, width: usize, channels: usize },
    Flat { len: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Image { height, width, channels } => height * width * channels,
            Shape::Flat { len } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        match *self {
            Shape::Image { channels, .. } => channels,
            Shape::Flat { .. } => 1,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Shape::Image { .. })
    }
}

/// Samples with integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub shape: Shape,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize, shape: Shape) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::Shape(format!("{} samples but {} labels", samples.len(), labels.len())));
        }
        if let Some(s) = samples.iter().find(|s| s.len() != shape.len()) {
            return Err(Error::Shape(format!("sample of length {} in dataset of shape {:?}", s.len(), shape)));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Parameter(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            shape: self.shape,
        }
    }

    /// Splits off the last `fraction` of samples (rounded down) as a held-out set.
    pub fn split_tail(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Parameter(format!("held-out fraction must be in [0,1), got {fraction}")));
        }
        let held = (self.len() as f64 * fraction).floor() as usize;
        let cut = self.len() - held;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head), self.subset(&tail)))
    }

    /// Keeps only samples whose label passes `keep`.
    pub fn filter_labels(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape("cannot concatenate datasets of different shapes".into()));
        }
        let mut out = self.clone();
        out.samples.extend(other.samples.iter().cloned());
        out.labels.extend(&other.labels);
        out.num_classes = self.num_classes.max(other.num_classes);
        Ok(out)
    }
}

/// Per-channel affine standardisation fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population mean and standard deviation per channel.
    pub fn fit(data: &LabeledDataset) -> Result<Self> {
        let c = data.shape.channels();
        let mut sum = vec![0.0; c];
        let mut count = vec![0usize; c];
        for s in &data.samples {
            for (k, v) in s.iter().enumerate() {
                sum[k % c] += v;
                count[k % c] += 1;
            }
        }
        if count.iter().any(|&n| n == 0) {
            return Err(Error::Parameter("cannot fit normalization on an empty dataset".into()));
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0; c];
        for s in &data.samples {
            for (k, v) in s.iter().enumerate() {
                let d = v - mean[k % c];
                sq[k % c] += d * d;
            }
        }
        let std = sq.iter().zip(&count).map(|(s, &n)| (s / n as f64).sqrt()).collect();
        let norm = Self { mean, std };
        norm.validate()?;
        Ok(norm)
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::Parameter("mean/std channel counts differ".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!("standard deviation must be > 0: {:?}", self.std)));
        }
        Ok(())
    }

    pub fn apply_sample(&self, x: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        x.iter().enumerate().map(|(k, v)| (v - self.mean[k % c]) / self.std[k % c]).collect()
    }

    pub fn invert_sample(&self, x: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        x.iter().enumerate().map(|(k, v)| v * self.std[k % c] + self.mean[k % c]).collect()
    }
}

/// `x -> (x - mean) / std` channel-wise.
pub fn normalize(data: &LabeledDataset, norm: &Normalization) -> Result<LabeledDataset> {
    norm.validate()?;
    if norm.mean.len() != data.shape.channels() {
        return Err(Error::Shape(format!(
            "normalization has {} channels, dataset has {}",
            norm.mean.len(),
            data.shape.channels()
        )));
    }
    Ok(LabeledDataset {
        samples: data.samples.iter().map(|s| norm.apply_sample(s)).collect(),
        ..data.clone()
    })
}

pub fn denormalize(data: &LabeledDataset, norm: &Normalization) -> Result<LabeledDataset> {
    norm.validate()?;
    Ok(LabeledDataset {
        samples: data.samples.iter().map(|s| norm.invert_sample(s)).collect(),
        ..data.clone()
    })
}
