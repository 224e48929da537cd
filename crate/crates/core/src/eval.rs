//! Clean and corrupted evaluation of both predictors.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt, CorruptionSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::head::{predict_two_stage, Mode, TwoStagePipeline};
use crate::metrics::{accuracy, brier, ece_mce, log_likelihood, BinConfidence, Prediction, ScoredPrediction};

pub const CLEAN: &str = "clean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Corruption kind name, or `clean`.
    pub kind: String,
    /// 0 for the clean condition.
    pub severity: u8,
    pub mode: Mode,
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub brier: f64,
    pub log_likelihood: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const EVAL_CSV_HEADER: &str = "kind,severity,mode,accuracy,ece,mce,brier,log_likelihood,n";
pub const PLOT_CSV_HEADER: &str = "mode,kind,severity,accuracy,ece";

impl EvalReport {
    pub fn row(&self, kind: &str, severity: u8, mode: Mode) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.kind == kind && r.severity == severity && r.mode == mode)
    }

    /// Mean `(accuracy, ece)` over the matching corrupted rows of `mode`.
    pub fn mean_over(&self, mode: Mode, kinds: &[&str], severities: &[u8]) -> Option<(f64, f64)> {
        let rows: Vec<&EvalRow> = self
            .rows
            .iter()
            .filter(|r| r.mode == mode && kinds.contains(&r.kind.as_str()) && severities.contains(&r.severity))
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
            rows.iter().map(|r| r.ece).sum::<f64>() / n,
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{EVAL_CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.kind, r.severity, r.mode, r.accuracy, r.ece, r.mce, r.brier, r.log_likelihood, r.n
            )
            .unwrap();
        }
        out
    }

    /// Accuracy against ECE per condition and mode, for scatter plots.
    pub fn to_plot_csv(&self) -> String {
        let mut out = format!("{PLOT_CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.mode, r.kind, r.severity, r.accuracy, r.ece).unwrap();
        }
        out
    }
}

fn metrics_row(kind: &str, severity: u8, mode: Mode, preds: &[ScoredPrediction], bins: BinConfidence) -> Result<EvalRow> {
    let cal = ece_mce(preds, bins)?;
    Ok(EvalRow {
        kind: kind.to_string(),
        severity,
        mode,
        accuracy: accuracy(preds)?,
        ece: cal.ece,
        mce: cal.mce,
        brier: brier(preds)?,
        log_likelihood: log_likelihood(preds)?,
        n: preds.len(),
    })
}

/// Scores already-normalised samples with both predictors on `workers` threads.
pub fn score_both(pipeline: &TwoStagePipeline, samples: &[Vec<f64>], workers: usize) -> Result<Vec<(Prediction, Prediction)>> {
    with_workers(workers, || {
        samples
            .par_iter()
            .map(|x| predict_two_stage(pipeline, x))
            .collect::<Result<Vec<_>>>()
    })?
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bins: BinConfidence,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bins: BinConfidence::Mean,
            workers: 1,
        }
    }
}

/// Evaluates the clean raw test set and every corruption condition. Raw
/// samples are corrupted first, then standardised with the pipeline's
/// training statistics. Rows: clean first, then conditions sorted by
/// (kind, severity); feed-forward before introspective.
pub fn evaluate(pipeline: &TwoStagePipeline, test: &LabeledDataset, conditions: &[CorruptionSpec], opts: &EvalOptions) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Parameter("evaluation needs a non-empty test set".into()));
    }
    let mut conds = conditions.to_vec();
    conds.sort_by_key(|c| (c.kind, c.severity, c.seed));
    let mut rows = Vec::with_capacity(2 * (conds.len() + 1));
    let mut run = |kind: &str, severity: u8, data: &LabeledDataset| -> Result<()> {
        let normed: Vec<Vec<f64>> = data.samples.iter().map(|s| pipeline.prepare(s)).collect();
        let scored = score_both(pipeline, &normed, opts.workers)?;
        let (ff, intro): (Vec<_>, Vec<_>) = scored
            .into_iter()
            .zip(&data.labels)
            .map(|((a, b), &y)| (a.with_label(y), b.with_label(y)))
            .unzip();
        rows.push(metrics_row(kind, severity, Mode::FeedForward, &ff, opts.bins)?);
        rows.push(metrics_row(kind, severity, Mode::Introspective, &intro, opts.bins)?);
        Ok(())
    };
    run(CLEAN, 0, test)?;
    for c in &conds {
        let data = corrupt(test, c)?;
        run(c.kind.name(), c.severity, &data)?;
    }
    Ok(EvalReport { rows })
}
