//! Five-level corruption suite.
//!
//! | kind           | parameter (severity 1..5)            |
//! |----------------|--------------------------------------|
//! | gaussian-noise | sigma 0.04 0.08 0.12 0.18 0.26       |
//! | salt-pepper    | fraction 0.02 0.05 0.10 0.15 0.25    |
//! | brightness     | add 0.05 0.10 0.15 0.20 0.30         |
//! | contrast       | scale 0.85 0.70 0.55 0.40 0.25       |
//! | box-blur       | kernel 2 3 4 5 7                     |
//! | motion-blur    | horizontal kernel 3 5 7 9 11         |
//! | over-exposure  | +0.1 +0.2 +0.3 +0.4 +0.5             |
//! | under-exposure | -0.1 -0.2 -0.3 -0.4 -0.5             |
//!
//! Each sample draws from its own stream `indexed(seed, i)`, so results do
//! not depend on processing order. Image outputs are clipped to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Shape};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    SaltPepper,
    Brightness,
    Contrast,
    BoxBlur,
    MotionBlur,
    OverExposure,
    UnderExposure,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::SaltPepper,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::BoxBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::OverExposure,
        CorruptionKind::UnderExposure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::SaltPepper => "salt-pepper",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::BoxBlur => "box-blur",
            CorruptionKind::MotionBlur => "motion-blur",
            CorruptionKind::OverExposure => "over-exposure",
            CorruptionKind::UnderExposure => "under-exposure",
        }
    }

    /// Parameter for severity 1..=5.
    pub fn parameter(self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Parameter(format!("severity must be in 1..=5, got {severity}")));
        }
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::SaltPepper => [0.02, 0.05, 0.10, 0.15, 0.25],
            CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
            CorruptionKind::Contrast => [0.85, 0.7, 0.55, 0.4, 0.25],
            CorruptionKind::BoxBlur => [2.0, 3.0, 4.0, 5.0, 7.0],
            CorruptionKind::MotionBlur => [3.0, 5.0, 7.0, 9.0, 11.0],
            CorruptionKind::OverExposure => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::UnderExposure => [-0.1, -0.2, -0.3, -0.4, -0.5],
        };
        Ok(table[severity as usize - 1])
    }

    pub fn is_spatial(self) -> bool {
        matches!(self, CorruptionKind::BoxBlur | CorruptionKind::MotionBlur)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

pub fn corrupt(data: &LabeledDataset, spec: &CorruptionSpec) -> Result<LabeledDataset> {
    let param = spec.kind.parameter(spec.severity)?;
    corrupt_with_param(data, spec.kind, param, spec.seed)
}

/// Applies `kind` with an explicit parameter (outside the severity table).
pub fn corrupt_with_param(data: &LabeledDataset, kind: CorruptionKind, param: f64, seed: u64) -> Result<LabeledDataset> {
    let (height, width, channels) = match data.shape {
        Shape::Image { height, width, channels } => (height, width, channels),
        Shape::Flat { .. } if kind.is_spatial() => {
            return Err(Error::Shape(format!("{kind} needs image-shaped data")));
        }
        Shape::Flat { len } => (1, len, 1),
    };
    let clip = data.shape.is_image();
    let samples = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r = rng::rng(rng::indexed(seed, i as u64));
            let mut y = match kind {
                CorruptionKind::GaussianNoise => x
                    .iter()
                    .map(|&v| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        v + param * z
                    })
                    .collect(),
                CorruptionKind::SaltPepper => x
                    .iter()
                    .map(|&v| {
                        if r.random::<f64>() < param {
                            if r.random::<bool>() { 1.0 } else { 0.0 }
                        } else {
                            v
                        }
                    })
                    .collect(),
                CorruptionKind::Brightness | CorruptionKind::OverExposure | CorruptionKind::UnderExposure => {
                    x.iter().map(|&v| v + param).collect()
                }
                CorruptionKind::Contrast => {
                    let mean = if x.is_empty() { 0.0 } else { x.iter().sum::<f64>() / x.len() as f64 };
                    x.iter().map(|&v| (v - mean) * param + mean).collect()
                }
                CorruptionKind::BoxBlur => box_filter(x, height, width, channels, param as usize, param as usize),
                CorruptionKind::MotionBlur => box_filter(x, height, width, channels, 1, param as usize),
            };
            if clip {
                for v in &mut y {
                    *v = v.clamp(0.0, 1.0);
                }
            }
            y
        })
        .collect();
    Ok(LabeledDataset {
        samples,
        ..data.clone()
    })
}

/// Mean filter over a `kh x kw` window with replicated borders. Even sizes
/// extend one pixel further down/right than up/left.
fn box_filter(x: &[f64], height: usize, width: usize, channels: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (kh, kw) = (kh.max(1), kw.max(1));
    let (up, left) = ((kh - 1) / 2, (kw - 1) / 2);
    let norm = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; x.len()];
    for yy in 0..height {
        for xx in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for dy in 0..kh {
                    let sy = (yy + dy).saturating_sub(up).min(height - 1);
                    for dx in 0..kw {
                        let sx = (xx + dx).saturating_sub(left).min(width - 1);
                        acc += x[(sy * width + sx) * channels + c];
                    }
                }
                out[(yy * width + xx) * channels + c] = acc * norm;
            }
        }
    }
    out
}

/// Appends `per_spec_count` corrupted copies per spec, each drawn without
/// replacement from `train`.
pub fn augment_with_noise(train: &LabeledDataset, specs: &[CorruptionSpec], per_spec_count: usize, seed: u64) -> Result<LabeledDataset> {
    if per_spec_count > train.len() {
        return Err(Error::Parameter(format!(
            "cannot draw {per_spec_count} samples from a training set of {}",
            train.len()
        )));
    }
    let mut out = train.clone();
    for (k, spec) in specs.iter().enumerate() {
        let mut r = rng::rng(rng::indexed(seed, k as u64));
        let picked = sample(&mut r, train.len(), per_spec_count).into_vec();
        let sub = train.subset(&picked);
        let spec = CorruptionSpec {
            seed: rng::indexed(seed ^ 0xA5A5_A5A5, k as u64),
            ..*spec
        };
        let noisy = corrupt(&sub, &spec)?;
        out.samples.extend(noisy.samples);
        out.labels.extend(noisy.labels);
    }
    Ok(out)
}
