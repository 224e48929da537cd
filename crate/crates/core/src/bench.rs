//! Timing of the N-pass oracle against single-pass extraction.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::with_workers;
use crate::introspection::{extract_exact, extract_fast};
use crate::nn::{LossSpec, Network};

/// Per-probe latency summary in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub total_s: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over the samples.
    pub fn from_micros(mut samples: Vec<f64>, total_s: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Parameter("no timing samples".into()));
        }
        samples.sort_by(f64::total_cmp);
        let rank = |q: f64| samples[((q * samples.len() as f64).ceil() as usize).clamp(1, samples.len()) - 1];
        Ok(Self {
            mean_us: samples.iter().sum::<f64>() / samples.len() as f64,
            p50_us: rank(0.5),
            p95_us: rank(0.95),
            total_s,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_probes: usize,
    pub num_classes: usize,
    pub penultimate_dim: usize,
    pub loss: String,
    pub workers: usize,
    pub exact: LatencyStats,
    pub fast: LatencyStats,
    /// Mean exact latency over mean fast latency.
    pub speedup: f64,
    /// Wall time of the fast path over all probes on one worker and on `workers`.
    pub fast_single_worker_s: f64,
    pub fast_multi_worker_s: f64,
    pub parallel_speedup: f64,
    /// Largest deviation between oracle and fast columns (after undoing the scale).
    pub max_deviation: f64,
}

fn time_each<T>(probes: &[Vec<f64>], mut f: impl FnMut(&[f64]) -> Result<T>) -> Result<(Vec<f64>, Vec<T>, f64)> {
    let mut micros = Vec::with_capacity(probes.len());
    let mut outs = Vec::with_capacity(probes.len());
    let all = Instant::now();
    for x in probes {
        let t = Instant::now();
        let out = f(x)?;
        micros.push(t.elapsed().as_secs_f64() * 1e6);
        outs.push(out);
    }
    Ok((micros, outs, all.elapsed().as_secs_f64()))
}

pub fn benchmark(net: &Network, probes: &[Vec<f64>], loss: &LossSpec, workers: usize) -> Result<BenchReport> {
    if probes.is_empty() {
        return Err(Error::Parameter("benchmark needs at least one probe".into()));
    }
    let workers = workers.max(1);
    // One untimed pass of each to warm caches.
    extract_exact(net, &probes[0], loss)?;
    extract_fast(net, &probes[0], loss)?;

    let (exact_us, exact_out, exact_total) = time_each(probes, |x| extract_exact(net, x, loss))?;
    let (fast_us, fast_out, fast_total) = time_each(probes, |x| extract_fast(net, x, loss))?;

    let mut max_deviation = 0.0f64;
    for (cols, feat) in exact_out.iter().zip(&fast_out) {
        for (j, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                max_deviation = max_deviation.max((v - feat.get(i, j) * feat.scale_factor()).abs());
            }
        }
    }

    let multi = Instant::now();
    with_workers(workers, || {
        probes
            .par_iter()
            .map(|x| extract_fast(net, x, loss).map(|_| ()))
            .collect::<Result<Vec<()>>>()
    })??;
    let multi_s = multi.elapsed().as_secs_f64();

    let exact = LatencyStats::from_micros(exact_us, exact_total)?;
    let fast = LatencyStats::from_micros(fast_us, fast_total)?;
    Ok(BenchReport {
        n_probes: probes.len(),
        num_classes: net.num_classes(),
        penultimate_dim: net.penultimate_dim(),
        loss: loss.name().to_string(),
        workers,
        speedup: exact.mean_us / fast.mean_us,
        exact,
        fast,
        fast_single_worker_s: fast_total,
        fast_multi_worker_s: multi_s,
        parallel_speedup: fast_total / multi_s,
        max_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng;

    #[test]
    fn percentiles_use_nearest_rank() {
        let s = LatencyStats::from_micros((1..=20).map(f64::from).collect(), 1.0).unwrap();
        assert_eq!(s.p50_us, 10.0);
        assert_eq!(s.p95_us, 19.0);
        assert_eq!(s.mean_us, 10.5);
        assert!(LatencyStats::from_micros(vec![], 0.0).is_err());
    }

    #[test]
    fn report_is_complete() {
        let mut r = rng::rng(1);
        let net = Network::random(&[6, 5, 4], Activation::Relu, &mut r).unwrap();
        let probes: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.1; 6]).collect();
        let rep = benchmark(&net, &probes, &LossSpec::CrossEntropy, 2).unwrap();
        assert_eq!(rep.n_probes, 10);
        assert!(rep.max_deviation <= 1e-12);
        let json = serde_json::to_value(&rep).unwrap();
        for key in ["exact", "fast", "speedup", "parallel_speedup", "max_deviation", "n_probes"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
