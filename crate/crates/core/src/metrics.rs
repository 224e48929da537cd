//! Accuracy, calibration, Brier score and log-likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, softmax};

pub const NUM_BINS: usize = 10;
pub const LOG_LIKELIHOOD_FLOOR: f64 = 1e-12;

/// Softmax output of one predictor for one sample, without the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub confidence: f64,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self::from_probabilities(softmax(logits))
    }

    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let predicted_class = argmax(&probabilities);
        let confidence = probabilities[predicted_class];
        Self {
            probabilities,
            predicted_class,
            confidence,
        }
    }

    pub fn with_label(self, true_label: usize) -> ScoredPrediction {
        ScoredPrediction {
            probabilities: self.probabilities,
            predicted_class: self.predicted_class,
            confidence: self.confidence,
            true_label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub confidence: f64,
    pub true_label: usize,
}

impl ScoredPrediction {
    pub fn is_correct(&self) -> bool {
        self.predicted_class == self.true_label
    }

    pub fn p_true(&self) -> f64 {
        self.probabilities.get(self.true_label).copied().unwrap_or(0.0)
    }
}

/// How a bin's confidence is summarised when comparing against its accuracy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinConfidence {
    /// Mean confidence of the predictions in the bin.
    #[default]
    Mean,
    /// Mid-point of the bin interval.
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Ten right-closed confidence bins `(0, 0.1], ..., (0.9, 1]`; a confidence of
/// exactly 0 falls in the first bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<BinStat>,
    pub ece: f64,
    pub mce: f64,
}

pub fn bin_index(confidence: f64) -> usize {
    let b = (confidence * NUM_BINS as f64).ceil() as isize - 1;
    b.clamp(0, NUM_BINS as isize - 1) as usize
}

fn require_non_empty(preds: &[ScoredPrediction]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Parameter("metric needs at least one prediction".into()));
    }
    Ok(())
}

/// Expected and maximum calibration error. Empty bins are skipped.
pub fn ece_mce(preds: &[ScoredPrediction], mode: BinConfidence) -> Result<CalibrationReport> {
    require_non_empty(preds)?;
    let mut count = [0usize; NUM_BINS];
    let mut conf = [0.0f64; NUM_BINS];
    let mut correct = [0usize; NUM_BINS];
    for p in preds {
        let b = bin_index(p.confidence);
        count[b] += 1;
        conf[b] += p.confidence;
        correct[b] += p.is_correct() as usize;
    }
    let total = preds.len() as f64;
    let mut bins = Vec::with_capacity(NUM_BINS);
    let (mut ece, mut mce) = (0.0f64, 0.0f64);
    for b in 0..NUM_BINS {
        if count[b] == 0 {
            bins.push(BinStat {
                count: 0,
                mean_confidence: 0.0,
                accuracy: 0.0,
            });
            continue;
        }
        let n = count[b] as f64;
        let mean_confidence = conf[b] / n;
        let accuracy = correct[b] as f64 / n;
        let reference = match mode {
            BinConfidence::Mean => mean_confidence,
            BinConfidence::Midpoint => (b as f64 + 0.5) / NUM_BINS as f64,
        };
        let gap = (accuracy - reference).abs();
        ece += n / total * gap;
        mce = mce.max(gap);
        bins.push(BinStat {
            count: count[b],
            mean_confidence,
            accuracy,
        });
    }
    Ok(CalibrationReport { bins, ece, mce })
}

pub fn accuracy(preds: &[ScoredPrediction]) -> Result<f64> {
    require_non_empty(preds)?;
    Ok(preds.iter().filter(|p| p.is_correct()).count() as f64 / preds.len() as f64)
}

/// Mean over samples of `sum_j (p_j - [j = y])^2`.
pub fn brier(preds: &[ScoredPrediction]) -> Result<f64> {
    require_non_empty(preds)?;
    let total: f64 = preds
        .iter()
        .map(|p| {
            p.probabilities
                .iter()
                .enumerate()
                .map(|(j, &q)| {
                    let t = if j == p.true_label { 1.0 } else { 0.0 };
                    (q - t) * (q - t)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Mean of `ln(max(p_true, 1e-12))`.
pub fn log_likelihood(preds: &[ScoredPrediction]) -> Result<f64> {
    require_non_empty(preds)?;
    let total: f64 = preds.iter().map(|p| p.p_true().max(LOG_LIKELIHOOD_FLOOR).ln()).sum();
    Ok(total / preds.len() as f64)
}
