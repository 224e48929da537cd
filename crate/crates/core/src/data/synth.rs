//! Seeded synthetic datasets.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Shape};
use crate::error::{Error, Result};
use crate::rng;

/// Gaussian clusters: one standard-normal centre per class, samples at
/// `centre + spread * N(0, I)`. Samples are interleaved by class.
pub fn synth_blobs(num_classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if num_classes == 0 || dim == 0 || per_class == 0 || spread < 0.0 {
        return Err(Error::Parameter("blob parameters must be positive".into()));
    }
    let mut r = rng::rng(seed);
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    let mut samples = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for (c, centre) in centres.iter().enumerate() {
            samples.push(
                centre
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        m + spread * z
                    })
                    .collect(),
            );
            labels.push(c);
        }
    }
    LabeledDataset::new(samples, labels, num_classes, Shape::Flat { len: dim })
}

/// Handwriting-like grayscale glyphs: every class owns a few random strokes;
/// each sample redraws them with jittered endpoints, a random shift, stroke
/// width and ink intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlyphConfig {
    pub num_classes: usize,
    pub side: usize,
    pub strokes: usize,
    /// Standard deviation of per-endpoint jitter, in pixels.
    pub jitter: f64,
    /// Maximum whole-glyph shift, in pixels.
    pub max_shift: f64,
    pub width_range: (f64, f64),
    pub ink_range: (f64, f64),
    /// Seed of the class prototypes; shared by train and test splits.
    pub prototype_seed: u64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            side: 28,
            strokes: 3,
            jitter: 1.3,
            max_shift: 2.5,
            width_range: (0.8, 1.5),
            ink_range: (0.7, 1.0),
            prototype_seed: 2024,
        }
    }
}

type Stroke = [(f64, f64); 2];

fn prototypes(cfg: &GlyphConfig) -> Vec<Vec<Stroke>> {
    let mut r = rng::rng(cfg.prototype_seed);
    let lo = cfg.side as f64 * 0.2;
    let hi = cfg.side as f64 * 0.8;
    (0..cfg.num_classes)
        .map(|_| {
            (0..cfg.strokes)
                .map(|_| {
                    [
                        (r.random_range(lo..hi), r.random_range(lo..hi)),
                        (r.random_range(lo..hi), r.random_range(lo..hi)),
                    ]
                })
                .collect()
        })
        .collect()
}

fn segment_distance_sq(px: f64, py: f64, [(ax, ay), (bx, by)]: Stroke) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx - px, ay + t * dy - py);
    cx * cx + cy * cy
}

pub fn synth_glyphs(cfg: &GlyphConfig, per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if cfg.num_classes == 0 || cfg.side == 0 || cfg.strokes == 0 {
        return Err(Error::Parameter("glyph parameters must be positive".into()));
    }
    if cfg.width_range.0 <= 0.0 || cfg.width_range.1 < cfg.width_range.0 || cfg.ink_range.1 < cfg.ink_range.0 {
        return Err(Error::Parameter("invalid glyph width or ink range".into()));
    }
    let protos = prototypes(cfg);
    let mut r = rng::rng(seed);
    let side = cfg.side;
    let mut samples = Vec::with_capacity(cfg.num_classes * per_class);
    let mut labels = Vec::with_capacity(cfg.num_classes * per_class);
    for _ in 0..per_class {
        for (c, proto) in protos.iter().enumerate() {
            let shift = (
                r.random_range(-cfg.max_shift..=cfg.max_shift),
                r.random_range(-cfg.max_shift..=cfg.max_shift),
            );
            let mut jit = || -> f64 {
                let z: f64 = StandardNormal.sample(&mut r);
                z * cfg.jitter
            };
            let strokes: Vec<Stroke> = proto
                .iter()
                .map(|s| {
                    [
                        (s[0].0 + shift.0 + jit(), s[0].1 + shift.1 + jit()),
                        (s[1].0 + shift.0 + jit(), s[1].1 + shift.1 + jit()),
                    ]
                })
                .collect();
            let width = r.random_range(cfg.width_range.0..=cfg.width_range.1);
            let ink = r.random_range(cfg.ink_range.0..=cfg.ink_range.1);
            let inv = 1.0 / (2.0 * width * width);
            let mut img = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let d2 = strokes
                        .iter()
                        .map(|&s| segment_distance_sq(px, py, s))
                        .fold(f64::INFINITY, f64::min);
                    let v = ink * (-d2 * inv).exp();
                    img.push(if v < 1e-3 { 0.0 } else { v.min(1.0) });
                }
            }
            samples.push(img);
            labels.push(c);
        }
    }
    LabeledDataset::new(
        samples,
        labels,
        cfg.num_classes,
        Shape::Image {
            height: side,
            width: side,
            channels: 1,
        },
    )
}

/// Images of i.i.d. uniform pixels, labelled 0. Used as a far out-of-distribution set.
pub fn uniform_noise_images(shape: Shape, count: usize, seed: u64) -> Result<LabeledDataset> {
    let mut r = rng::rng(seed);
    let samples = (0..count)
        .map(|_| (0..shape.len()).map(|_| r.random::<f64>()).collect())
        .collect();
    LabeledDataset::new(samples, vec![0; count], 1, shape)
}
