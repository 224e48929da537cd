//! Losses over raw logits and their closed-form logit gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss used both for training and for introspective extraction.
///
/// `MseM` is squared error against `m * target`, where `m` is the
/// training-set mean of the maximum logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossSpec {
    CrossEntropy,
    MseM { m: f64 },
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::CrossEntropy => Ok(()),
            LossSpec::MseM { m } if m > 0.0 && m.is_finite() => Ok(()),
            LossSpec::MseM { m } => Err(Error::Parameter(format!("MSE-M scale must be > 0, got {m}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::CrossEntropy => "ce",
            LossSpec::MseM { .. } => "mse-m",
        }
    }

    pub fn m_scale(&self) -> Option<f64> {
        match *self {
            LossSpec::CrossEntropy => None,
            LossSpec::MseM { m } => Some(m),
        }
    }
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Loss value and gradient with respect to the logits.
///
/// Cross entropy is `-<target, z> + logsumexp(z)`; its logit gradient is
/// `softmax(z) - target` for any target vector, so the softmax term lands in
/// every column regardless of which class is being asked about.
pub fn loss_and_logit_grad(spec: &LossSpec, logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() {
        return Err(Error::Shape(format!(
            "logits have length {}, target has length {}",
            logits.len(),
            target.len()
        )));
    }
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::Numeric(format!("logit {z}")));
    }
    match *spec {
        LossSpec::CrossEntropy => {
            let lse = log_sum_exp(logits);
            let dot: f64 = logits.iter().zip(target).map(|(z, t)| z * t).sum();
            let p = softmax(logits);
            let grad = p.iter().zip(target).map(|(p, t)| p - t).collect();
            Ok((lse - dot, grad))
        }
        LossSpec::MseM { m } => {
            let mut loss = 0.0;
            let grad = logits
                .iter()
                .zip(target)
                .map(|(z, t)| {
                    let r = z - m * t;
                    loss += r * r;
                    2.0 * r
                })
                .collect();
            Ok((loss, grad))
        }
    }
}

pub fn one_hot(n: usize, class: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = 1.0;
    v
}
