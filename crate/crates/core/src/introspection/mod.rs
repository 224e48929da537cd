//! Introspective gradient features.
//!
//! For an introspective class `I` the feature is the gradient of
//! `J(e_I, logits)` with respect to the `I`-th filter (column) of the final
//! layer. Backpropagating the all-ones target once yields all `N` columns at
//! the cost of a single pass; [`extract_exact`] keeps the `N`-pass route as an
//! oracle.

mod fisher;
mod table;

pub use fisher::{fisher_variance, FisherDiagnostic, FisherMetric, DEFAULT_RIDGE};
pub use table::{parse_feature_table, read_feature_table, write_feature_table, FeatureSidecar, SCALE_CONVENTION};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, loss_and_logit_grad, one_hot, ForwardTrace, LossSpec, Network};

/// A `d x N` final-layer gradient, flattened column-major and divided by its
/// largest absolute entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrospectiveFeature {
    rows: usize,
    cols: usize,
    /// Column-major: entry `(i, j)` lives at `j * rows + i`.
    vectorized: Vec<f64>,
    scale_factor: f64,
}

impl IntrospectiveFeature {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn vectorized(&self) -> &[f64] {
        &self.vectorized
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vectorized
    }

    /// The raw matrix was divided by this value (1 for an all-zero matrix).
    pub fn scale_factor(&self) -> f64 {
        self.scale_factor
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.vectorized[j * self.rows + i]
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.vectorized[j * self.rows..(j + 1) * self.rows]
    }
}

/// Divides a column-major `rows x cols` matrix by its max absolute entry.
pub fn scale_feature(raw: Vec<f64>, rows: usize, cols: usize) -> Result<IntrospectiveFeature> {
    if raw.len() != rows * cols {
        return Err(Error::Shape(format!("{} entries for a {rows}x{cols} matrix", raw.len())));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("introspective matrix has non-finite entries".into()));
    }
    let max = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (vectorized, scale_factor) = if max == 0.0 {
        (raw, 1.0)
    } else {
        (raw.into_iter().map(|v| v / max).collect(), max)
    };
    Ok(IntrospectiveFeature {
        rows,
        cols,
        vectorized,
        scale_factor,
    })
}

/// N-pass oracle: for every class `I`, a fresh forward pass, the loss with
/// target `e_I`, the final-layer gradient, and its column `I`.
pub fn extract_exact(net: &Network, x: &[f64], spec: &LossSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let n = net.num_classes();
    let d = net.penultimate_dim();
    (0..n)
        .map(|class| {
            let trace = net.forward(x)?;
            let (_, dz) = loss_and_logit_grad(spec, trace.logits(), &one_hot(n, class))?;
            let grad = net.final_layer_grad(&trace, &dz)?;
            Ok((0..d).map(|i| grad[i * n + class]).collect())
        })
        .collect()
}

/// Unscaled single-pass extraction, keeping the forward trace and the logit
/// residuals (`dJ/dlogits` for the all-ones target).
#[derive(Debug, Clone)]
pub struct RawIntrospection {
    pub trace: ForwardTrace,
    pub residuals: Vec<f64>,
    /// Column-major `d x N`.
    pub matrix: Vec<f64>,
}

pub fn extract_raw(net: &Network, x: &[f64], spec: &LossSpec) -> Result<RawIntrospection> {
    spec.validate()?;
    let trace = net.forward(x)?;
    let n = net.num_classes();
    let (_, residuals) = loss_and_logit_grad(spec, trace.logits(), &vec![1.0; n])?;
    let h = trace.penultimate();
    let mut matrix = Vec::with_capacity(h.len() * n);
    for &r in &residuals {
        matrix.extend(h.iter().map(|&hi| hi * r));
    }
    Ok(RawIntrospection {
        trace,
        residuals,
        matrix,
    })
}

/// Single-pass extraction with the all-ones target, scaled to `[-1, 1]`.
pub fn extract_fast(net: &Network, x: &[f64], spec: &LossSpec) -> Result<IntrospectiveFeature> {
    let raw = extract_raw(net, x, spec)?;
    scale_feature(raw.matrix, net.penultimate_dim(), net.num_classes())
}

/// [`extract_fast`] over many samples on `workers` threads. Output order
/// follows input order and does not depend on the worker count.
pub fn extract_batch(net: &Network, samples: &[Vec<f64>], spec: &LossSpec, workers: usize) -> Result<Vec<IntrospectiveFeature>> {
    if workers <= 1 || samples.len() < 2 {
        return samples.iter().map(|x| extract_fast(net, x, spec)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    pool.install(|| samples.par_iter().map(|x| extract_fast(net, x, spec)).collect())
}

/// Training-set mean of the maximum logit, the `M` of the MSE-M loss.
pub fn mean_max_logit(net: &Network, samples: &[Vec<f64>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("need samples to estimate M".into()));
    }
    let mut total = 0.0;
    for x in samples {
        let z = net.logits(x)?;
        total += z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSparsity {
    pub predicted: usize,
    /// Off-support energy ratio for each introspective class `I`.
    pub ratios: Vec<f64>,
}

/// Share of Frobenius energy of each per-class gradient matrix
/// `grad_{W_L} J(e_I, logits)` lying outside filters `I` and the predicted one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub probes: Vec<ProbeSparsity>,
    pub mean_ratio: f64,
    pub max_ratio: f64,
}

pub fn sparsity_report(net: &Network, probes: &[Vec<f64>], spec: &LossSpec) -> Result<SparsityReport> {
    spec.validate()?;
    if probes.is_empty() {
        return Err(Error::Parameter("sparsity report needs at least one probe".into()));
    }
    let n = net.num_classes();
    let mut out = Vec::with_capacity(probes.len());
    let (mut sum, mut count, mut max_ratio) = (0.0, 0usize, 0.0f64);
    for x in probes {
        let trace = net.forward(x)?;
        let predicted = argmax(trace.logits());
        let mut ratios = Vec::with_capacity(n);
        for class in 0..n {
            let (_, dz) = loss_and_logit_grad(spec, trace.logits(), &one_hot(n, class))?;
            let grad = net.final_layer_grad(&trace, &dz)?;
            let mut energy = vec![0.0; n];
            for (k, g) in grad.iter().enumerate() {
                energy[k % n] += g * g;
            }
            let total: f64 = energy.iter().sum();
            let off: f64 = energy
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != class && *j != predicted)
                .map(|(_, e)| e)
                .sum();
            let ratio = if total > 0.0 { (off / total).clamp(0.0, 1.0) } else { 0.0 };
            sum += ratio;
            count += 1;
            max_ratio = max_ratio.max(ratio);
            ratios.push(ratio);
        }
        out.push(ProbeSparsity { predicted, ratios });
    }
    Ok(SparsityReport {
        probes: out,
        mean_ratio: sum / count as f64,
        max_ratio,
    })
}
