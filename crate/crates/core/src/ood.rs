//! Out-of-distribution scoring (MSP, ODIN) and detection metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::eval::with_workers;
use crate::head::{Mode, TwoStagePipeline};
use crate::introspection::{extract_raw, scale_feature};
use crate::metrics::Prediction;
use crate::nn::{argmax, softmax, LossSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodMethod {
    Msp,
    Odin,
}

impl OodMethod {
    pub const ALL: [OodMethod; 2] = [OodMethod::Msp, OodMethod::Odin];

    pub fn name(self) -> &'static str {
        match self {
            OodMethod::Msp => "msp",
            OodMethod::Odin => "odin",
        }
    }
}

impl std::fmt::Display for OodMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OodMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OodMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown OOD method `{s}`")))
    }
}

/// Higher means more in-distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub score: f64,
    pub source: OodMethod,
    pub mode: Mode,
}

/// Maximum softmax probability of the mode's predictor on a normalised input.
pub fn msp_score(mode: Mode, pipeline: &TwoStagePipeline, x: &[f64]) -> Result<OodScore> {
    Ok(OodScore {
        score: pipeline.predict(mode, x)?.confidence,
        source: OodMethod::Msp,
        mode,
    })
}

/// Gradient of `objective(logits)` with respect to the normalised input,
/// where `dlogits` is the objective's gradient at the mode's logits. In
/// introspective mode the per-sample max-abs scale of the feature is held
/// constant.
pub fn pipeline_input_grad(mode: Mode, pipeline: &TwoStagePipeline, x: &[f64], dlogits: impl Fn(&[f64]) -> Vec<f64>) -> Result<Vec<f64>> {
    let f = &pipeline.sensing;
    match mode {
        Mode::FeedForward => {
            let trace = f.forward(x)?;
            f.input_grad(&trace, &dlogits(trace.logits()), None)
        }
        Mode::Introspective => {
            let raw = extract_raw(f, x, &pipeline.loss)?;
            let (d, n) = (f.penultimate_dim(), f.num_classes());
            let feature = scale_feature(raw.matrix.clone(), d, n)?;
            let s = feature.scale_factor();
            let h_net = &pipeline.head.network;
            let h_trace = h_net.forward(feature.vectorized())?;
            let dr = h_net.input_grad(&h_trace, &dlogits(h_trace.logits()), None)?;
            // R[i, j] = h_i g_j, stored column-major; r = R / s.
            let h = raw.trace.penultimate();
            let g = &raw.residuals;
            let mut dh = vec![0.0; d];
            let mut dg = vec![0.0; n];
            for j in 0..n {
                for i in 0..d {
                    let v = dr[j * d + i] / s;
                    dh[i] += v * g[j];
                    dg[j] += v * h[i];
                }
            }
            let dz = match pipeline.loss {
                LossSpec::CrossEntropy => {
                    // g = softmax(z) - 1
                    let p = softmax(raw.trace.logits());
                    let dot: f64 = dg.iter().zip(&p).map(|(a, b)| a * b).sum();
                    p.iter().zip(&dg).map(|(pk, ak)| pk * (ak - dot)).collect::<Vec<_>>()
                }
                LossSpec::MseM { .. } => dg.iter().map(|a| 2.0 * a).collect(),
            };
            f.input_grad(&raw.trace, &dz, Some(&dh))
        }
    }
}

fn tempered_msp(logits: &[f64], t: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
    Prediction::from_logits(&scaled).confidence
}

/// One signed-gradient step of size `eps` that raises the tempered maximum
/// softmax probability.
pub fn perturb_toward_in(mode: Mode, pipeline: &TwoStagePipeline, x: &[f64], t: f64, eps: f64) -> Result<Vec<f64>> {
    // d/dz of -ln max softmax(z / T) is (softmax(z / T) - e_yhat) / T.
    let grad = pipeline_input_grad(mode, pipeline, x, |z| {
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        let mut p = softmax(&scaled);
        let top = argmax(&p);
        p[top] -= 1.0;
        p.iter().map(|v| v / t).collect()
    })?;
    Ok(x.iter().zip(&grad).map(|(xi, gi)| xi - eps * sign(*gi)).collect())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// ODIN: temperature-scaled MSP after an input perturbation of size `eps`.
/// `eps = 0` skips the perturbation.
pub fn odin_score(mode: Mode, pipeline: &TwoStagePipeline, x: &[f64], t: f64, eps: f64) -> Result<OodScore> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("perturbation must be non-negative, got {eps}")));
    }
    let score = if eps == 0.0 {
        tempered_msp(&pipeline.logits(mode, x)?, t)
    } else {
        let xp = perturb_toward_in(mode, pipeline, x, t, eps)?;
        tempered_msp(&pipeline.logits(mode, &xp)?, t)
    };
    Ok(OodScore {
        score,
        source: OodMethod::Odin,
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub fpr_at_95_tpr: f64,
    pub detection_error: f64,
    pub auroc: f64,
}

/// FPR at 95% TPR, detection error and AUROC, treating scores at or above a
/// threshold as in-distribution.
pub fn detection_metrics(in_scores: &[f64], out_scores: &[f64]) -> Result<DetectionMetrics> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::Parameter("detection metrics need non-empty score lists".into()));
    }
    if in_scores.iter().chain(out_scores).any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let (n_in, n_out) = (in_scores.len(), out_scores.len());
    let mut ins = in_scores.to_vec();
    let mut outs = out_scores.to_vec();
    ins.sort_by(f64::total_cmp);
    outs.sort_by(f64::total_cmp);
    // Number of entries of a sorted list that are >= t.
    let at_least = |v: &[f64], t: f64| v.len() - v.partition_point(|&s| s < t);
    let below = |v: &[f64], t: f64| v.partition_point(|&s| s < t);

    // Twice the count of (in, out) pairs won, ties counting one.
    let mut twice: u64 = 0;
    for &s in &ins {
        let lt = below(&outs, s);
        let le = outs.partition_point(|&o| o <= s);
        twice += 2 * lt as u64 + (le - lt) as u64;
    }
    let auroc = twice as f64 / (2 * n_in * n_out) as f64;

    // Largest threshold that still accepts 95% of the in-distribution scores.
    let mut fpr95 = 1.0;
    for &t in ins.iter().rev() {
        if 100 * at_least(&ins, t) >= 95 * n_in {
            fpr95 = at_least(&outs, t) as f64 / n_out as f64;
            break;
        }
    }

    let mut det = 0.5; // threshold above every score
    for &t in ins.iter().chain(&outs) {
        let tpr = at_least(&ins, t) as f64 / n_in as f64;
        let fpr = at_least(&outs, t) as f64 / n_out as f64;
        det = f64::min(det, 0.5 * (1.0 - tpr) + 0.5 * fpr);
    }
    Ok(DetectionMetrics {
        fpr_at_95_tpr: fpr95,
        detection_error: det,
        auroc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    pub methods: Vec<OodMethod>,
    pub modes: Vec<Mode>,
    pub temperature: f64,
    /// ODIN input-perturbation size; 0 gives temperature scaling only.
    pub odin_epsilon: f64,
    /// Push OOD inputs toward higher in-distribution score before scoring.
    pub adversarial: bool,
    pub adversarial_epsilon: f64,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            methods: OodMethod::ALL.to_vec(),
            modes: Mode::BOTH.to_vec(),
            temperature: 1000.0,
            odin_epsilon: 0.0014,
            adversarial: false,
            adversarial_epsilon: 0.0014,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub method: OodMethod,
    pub mode: Mode,
    pub ood_set: String,
    pub fpr95: f64,
    pub det_err: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OodReport {
    pub rows: Vec<OodRow>,
}

pub const OOD_CSV_HEADER: &str = "method,mode,ood_set,fpr95,det_err,auroc";

impl OodReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{OOD_CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{},{}\n", r.method, r.mode, r.ood_set, r.fpr95, r.det_err, r.auroc));
        }
        s
    }

    pub fn row(&self, method: OodMethod, mode: Mode, set: &str) -> Option<&OodRow> {
        self.rows.iter().find(|r| r.method == method && r.mode == mode && r.ood_set == set)
    }
}

/// Scores of already-normalised samples, in input order.
pub fn score_all(method: OodMethod, mode: Mode, pipeline: &TwoStagePipeline, samples: &[Vec<f64>], cfg: &OodConfig, workers: usize) -> Result<Vec<f64>> {
    with_workers(workers, || {
        samples
            .par_iter()
            .map(|x| match method {
                OodMethod::Msp => msp_score(mode, pipeline, x).map(|s| s.score),
                OodMethod::Odin => odin_score(mode, pipeline, x, cfg.temperature, cfg.odin_epsilon).map(|s| s.score),
            })
            .collect::<Result<Vec<_>>>()
    })?
}

/// Every (method, mode, OOD set) combination, in that nesting order. All
/// datasets are raw and are standardised with the pipeline's statistics.
pub fn run_ood(pipeline: &TwoStagePipeline, in_test: &LabeledDataset, ood_sets: &[(String, LabeledDataset)], cfg: &OodConfig, workers: usize) -> Result<OodReport> {
    if ood_sets.is_empty() {
        return Ok(OodReport::default());
    }
    let dim = pipeline.sensing.input_dim();
    for (name, set) in ood_sets.iter().chain(std::iter::once(&("in".to_string(), in_test.clone()))) {
        if set.shape.len() != dim {
            return Err(Error::Shape(format!("OOD set `{name}` has dimension {}, expected {dim}", set.shape.len())));
        }
    }
    let prep = |d: &LabeledDataset| -> Vec<Vec<f64>> { d.samples.iter().map(|s| pipeline.prepare(s)).collect() };
    let in_x = prep(in_test);
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &mode in &cfg.modes {
            let in_scores = score_all(method, mode, pipeline, &in_x, cfg, workers)?;
            for (name, set) in ood_sets {
                let mut x = prep(set);
                if cfg.adversarial {
                    x = with_workers(workers, || {
                        x.par_iter()
                            .map(|s| perturb_toward_in(mode, pipeline, s, 1.0, cfg.adversarial_epsilon))
                            .collect::<Result<Vec<_>>>()
                    })??;
                }
                let out_scores = score_all(method, mode, pipeline, &x, cfg, workers)?;
                let m = detection_metrics(&in_scores, &out_scores)?;
                rows.push(OodRow {
                    method,
                    mode,
                    ood_set: name.clone(),
                    fpr95: m.fpr_at_95_tpr,
                    det_err: m.detection_error,
                    auroc: m.auroc,
                });
            }
        }
    }
    Ok(OodReport { rows })
}
