//! Pool-based active learning against either predictor.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt, CorruptionKind, CorruptionSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::with_workers;
use crate::fit::{fit_head, fit_sensing, FitSeeds, FitSpec, SensingFit};
use crate::head::{IntrospectiveHead, Mode, TwoStagePipeline};
use crate::introspection::extract_fast;
use crate::nn::{argmax, forward_mc_dropout, softmax, LossSpec, Network};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Entropy,
    LeastConfidence,
    Margin,
    Bald,
    Badge,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Entropy, Strategy::LeastConfidence, Strategy::Margin, Strategy::Bald, Strategy::Badge];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Entropy => "entropy",
            Strategy::LeastConfidence => "least-confidence",
            Strategy::Margin => "margin",
            Strategy::Bald => "bald",
            Strategy::Badge => "badge",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// `-sum p ln p`, with `0 ln 0 = 0`.
pub fn score_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
}

pub fn score_least_confidence(p: &[f64]) -> f64 {
    1.0 - p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Negated gap between the two largest probabilities.
pub fn score_margin(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::Parameter("margin needs at least two classes".into()));
    }
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &q in p {
        if q > a {
            b = a;
            a = q;
        } else if q > b {
            b = q;
        }
    }
    Ok(-(a - b))
}

/// Mutual information between the prediction and the dropout mask,
/// `H(mean p_k) - mean H(p_k)`.
pub fn score_bald(mc_probs: &[Vec<f64>]) -> Result<f64> {
    let k = mc_probs.len();
    if k < 2 {
        return Err(Error::Parameter(format!("BALD needs at least 2 passes, got {k}")));
    }
    let n = mc_probs[0].len();
    if mc_probs.iter().any(|p| p.len() != n) {
        return Err(Error::Shape("BALD passes disagree on class count".into()));
    }
    let mut mean = vec![0.0; n];
    for p in mc_probs {
        for (m, q) in mean.iter_mut().zip(p) {
            *m += q;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let expected = mc_probs.iter().map(|p| score_entropy(p)).sum::<f64>() / k as f64;
    Ok(score_entropy(&mean) - expected)
}

/// The network a mode scores with and how its input is derived from a
/// normalised sample.
#[derive(Clone, Copy)]
struct Predictor<'a> {
    net: &'a Network,
    extract: Option<(&'a Network, &'a LossSpec)>,
}

impl<'a> Predictor<'a> {
    fn new(mode: Mode, sensing: &'a Network, loss: &'a LossSpec, head: Option<&'a IntrospectiveHead>) -> Result<Self> {
        match (mode, head) {
            (Mode::FeedForward, _) => Ok(Self { net: sensing, extract: None }),
            (Mode::Introspective, Some(h)) => Ok(Self {
                net: &h.network,
                extract: Some((sensing, loss)),
            }),
            (Mode::Introspective, None) => Err(Error::Parameter("introspective mode needs a head".into())),
        }
    }

    fn of(mode: Mode, p: &'a TwoStagePipeline) -> Self {
        Self::new(mode, &p.sensing, &p.loss, Some(&p.head)).expect("pipeline always has a head")
    }

    fn input(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.extract {
            None => Ok(x.to_vec()),
            Some((f, loss)) => Ok(extract_fast(f, x, loss)?.into_vec()),
        }
    }

    fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.net.logits(&self.input(x)?)?))
    }

    fn badge(&self, x: &[f64]) -> Result<Vec<f64>> {
        badge_from_net(self.net, &self.input(x)?)
    }

    fn mc_probabilities(&self, x: &[f64], passes: usize, rate: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
        let input = self.input(x)?;
        forward_mc_dropout(self.net, &input, passes, rate, seed)
    }
}

fn badge_from_net(net: &Network, input: &[f64]) -> Result<Vec<f64>> {
    let trace = net.forward(input)?;
    let mut g = softmax(trace.logits());
    let top = argmax(&g);
    g[top] -= 1.0;
    let h = trace.penultimate();
    let mut out = Vec::with_capacity(h.len() * g.len());
    for gj in &g {
        out.extend(h.iter().map(|hi| hi * gj));
    }
    Ok(out)
}

/// Gradient embedding `(p - e_yhat) (x) h` of the mode's scoring network,
/// where `h` is its last layer's input. Column-major: class blocks of
/// length `h.len()`.
pub fn badge_embedding(mode: Mode, pipeline: &TwoStagePipeline, x: &[f64]) -> Result<Vec<f64>> {
    Predictor::of(mode, pipeline).badge(x)
}

/// k-means++ seeding: the first centre is uniform, each further centre is
/// drawn with probability proportional to its squared distance to the
/// nearest chosen centre (uniform among the rest when all distances are 0).
pub fn kmeanspp_select(embeddings: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = embeddings.len();
    if k > n {
        return Err(Error::Parameter(format!("cannot select {k} of {n} points")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut rng = rng::rng(seed);
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut chosen = vec![false; n];
    let mut picks = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; n];
    let mut next = rng.random_range(0..n);
    loop {
        chosen[next] = true;
        picks.push(next);
        if picks.len() == k {
            return Ok(picks);
        }
        for (i, e) in embeddings.iter().enumerate() {
            if !chosen[i] {
                nearest[i] = nearest[i].min(dist2(e, &embeddings[next]));
            }
        }
        let total: f64 = (0..n).filter(|&i| !chosen[i]).map(|i| nearest[i]).sum();
        let remaining: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
        next = if total > 0.0 && total.is_finite() {
            let mut u = rng.random::<f64>() * total;
            let mut pick = *remaining.iter().rev().find(|&&i| nearest[i] > 0.0).expect("positive total");
            for &i in &remaining {
                if nearest[i] > 0.0 && u < nearest[i] {
                    pick = i;
                    break;
                }
                u -= nearest[i];
            }
            pick
        } else {
            remaining[rng.random_range(0..remaining.len())]
        };
    }
}

/// A dataset with a labeled/unlabeled index partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub dataset: LabeledDataset,
    labeled: Vec<usize>,
    unlabeled: BTreeSet<usize>,
}

impl Pool {
    pub fn new(dataset: LabeledDataset) -> Self {
        let unlabeled = (0..dataset.len()).collect();
        Self {
            dataset,
            labeled: Vec::new(),
            unlabeled,
        }
    }

    /// Labeled indices in the order they were labeled.
    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    /// Unlabeled indices, ascending.
    pub fn unlabeled(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    pub fn label(&mut self, indices: &[usize]) -> Result<()> {
        let fresh: BTreeSet<usize> = indices.iter().copied().collect();
        if fresh.len() != indices.len() || !fresh.is_subset(&self.unlabeled) {
            return Err(Error::Parameter("query must be distinct unlabeled indices".into()));
        }
        for i in indices {
            self.unlabeled.remove(i);
        }
        self.labeled.extend_from_slice(indices);
        Ok(())
    }

    pub fn labeled_set(&self) -> LabeledDataset {
        self.dataset.subset(&self.labeled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ALConfig {
    pub strategy: Strategy,
    pub mode: Mode,
    pub rounds: usize,
    pub query_batch: usize,
    pub initial_random: usize,
    pub seed: u64,
    pub bald_passes: usize,
    pub bald_rate: f64,
    /// Continue from the previous round's weights instead of a fresh init.
    pub warm_start: bool,
    /// Severity of the Gaussian-noise test set.
    pub corrupted_severity: u8,
    /// Lower bound on SGD steps per stage; small labeled sets get more
    /// epochs so that both networks actually fit them.
    pub min_steps: usize,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Margin,
            mode: Mode::Introspective,
            rounds: 10,
            query_batch: 200,
            initial_random: 100,
            seed: 0,
            bald_passes: 10,
            bald_rate: 0.3,
            warm_start: false,
            corrupted_severity: 3,
            min_steps: 1500,
        }
    }
}

/// `fit` with each schedule stretched to at least `min_steps` batches on `n` samples.
pub fn stretch_schedules(fit: &FitSpec, n: usize, min_steps: usize) -> FitSpec {
    let epochs = |cfg: &crate::nn::TrainConfig| {
        let per_epoch = n.div_ceil(cfg.batch_size).max(1);
        cfg.epochs.max(min_steps.div_ceil(per_epoch))
    };
    let (ef, eh) = (epochs(&fit.train_sense), epochs(&fit.train_head));
    if ef == fit.train_sense.epochs && eh == fit.train_head.epochs {
        return fit.clone();
    }
    fit.clone().with_epochs(ef, eh)
}

impl ALConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        let need = self.rounds.checked_mul(self.query_batch).and_then(|q| q.checked_add(self.initial_random));
        match need {
            Some(n) if n <= pool_size => {}
            _ => {
                return Err(Error::Parameter(format!(
                    "budget {} + {}x{} exceeds pool of {pool_size}",
                    self.initial_random, self.rounds, self.query_batch
                )))
            }
        }
        if self.initial_random == 0 {
            return Err(Error::Parameter("initial_random must be positive".into()));
        }
        if self.strategy == Strategy::Bald {
            if self.bald_passes < 2 {
                return Err(Error::Parameter("bald_passes must be at least 2".into()));
            }
            if !(self.bald_rate > 0.0 && self.bald_rate < 1.0) {
                return Err(Error::Parameter("bald_rate must be in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALRow {
    pub round: usize,
    pub strategy: Strategy,
    pub mode: Mode,
    pub labeled_count: usize,
    pub clean_acc: f64,
    pub corrupted_acc: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALReport {
    pub rows: Vec<ALRow>,
    /// Indices labeled at round 0 and by each later query, in order.
    pub queries: Vec<Vec<usize>>,
}

pub const AL_CSV_HEADER: &str = "round,strategy,mode,labeled_count,clean_acc,corrupted_acc,seed";

impl ALReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{AL_CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.round, r.strategy, r.mode, r.labeled_count, r.clean_acc, r.corrupted_acc, r.seed
            ));
        }
        s
    }

    pub fn mean_corrupted_acc(&self) -> f64 {
        self.rows.iter().map(|r| r.corrupted_acc).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

/// The seeded round-0 labeled set; depends on the seed and pool size only.
pub fn initial_indices(pool_size: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool_size).collect();
    let mut r = rng::rng(rng::substream(rng::substream(seed, stream::AL), "initial"));
    let (head, _) = idx.partial_shuffle(&mut r, count);
    head.to_vec()
}

/// Indices of the `k` largest scores; ties go to the smaller index.
pub fn top_k(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(i, _)| i).collect()
}

struct RoundModel {
    sensing: SensingFit,
    head: Option<IntrospectiveHead>,
}

impl RoundModel {
    fn predictor(&self, mode: Mode) -> Result<Predictor<'_>> {
        Predictor::new(mode, &self.sensing.network, &self.sensing.loss, self.head.as_ref())
    }

    fn accuracy(&self, mode: Mode, test: &LabeledDataset, workers: usize) -> Result<f64> {
        let p = self.predictor(mode)?;
        let norm = &self.sensing.normalization;
        let hits = with_workers(workers, || {
            test.samples
                .par_iter()
                .zip(&test.labels)
                .map(|(x, &y)| Ok((argmax(&p.probabilities(&norm.apply_sample(x))?) == y) as usize))
                .collect::<Result<Vec<usize>>>()
        })??;
        Ok(hits.iter().sum::<usize>() as f64 / test.len().max(1) as f64)
    }
}

/// Runs the query loop. `fit` is the training template for every round;
/// `test` is raw and is also corrupted with Gaussian noise for the second
/// accuracy column.
pub fn run_active_learning(pool: &Pool, test: &LabeledDataset, fit: &FitSpec, cfg: &ALConfig, workers: usize) -> Result<ALReport> {
    cfg.validate(pool.unlabeled.len())?;
    let mut pool = pool.clone();
    let al_seed = rng::substream(cfg.seed, stream::AL);
    let corrupted = corrupt(
        test,
        &CorruptionSpec {
            kind: CorruptionKind::GaussianNoise,
            severity: cfg.corrupted_severity,
            seed: rng::substream(cfg.seed, stream::CORRUPTION),
        },
    )?;

    let first: Vec<usize> = {
        let free = pool.unlabeled();
        initial_indices(free.len(), cfg.initial_random, cfg.seed)
            .into_iter()
            .map(|i| free[i])
            .collect()
    };
    pool.label(&first)?;
    let mut queries = vec![first];
    let mut rows = Vec::with_capacity(cfg.rounds + 1);
    let mut prev: Option<RoundModel> = None;

    for round in 0..=cfg.rounds {
        let round_seed = rng::indexed(al_seed, round as u64);
        // Training seeds ignore the mode so both modes share f at every round.
        let seeds = FitSeeds::from_global(round_seed);
        let labeled = pool.labeled_set();
        let fit = &stretch_schedules(fit, labeled.len(), cfg.min_steps);
        let warm = if cfg.warm_start { prev.as_ref() } else { None };
        let sensing = fit_sensing(&labeled, fit, seeds, warm.map(|m| &m.sensing.network), |_, _| Ok(()))?;
        let head = match cfg.mode {
            Mode::FeedForward => None,
            Mode::Introspective => {
                let init = warm.and_then(|m| m.head.as_ref());
                Some(fit_head(&sensing, &labeled, fit, seeds, workers, init)?.0)
            }
        };
        let model = RoundModel { sensing, head };
        rows.push(ALRow {
            round,
            strategy: cfg.strategy,
            mode: cfg.mode,
            labeled_count: pool.labeled.len(),
            clean_acc: model.accuracy(cfg.mode, test, workers)?,
            corrupted_acc: model.accuracy(cfg.mode, &corrupted, workers)?,
            seed: cfg.seed,
        });
        if round < cfg.rounds {
            let picked = query(&pool, &model, cfg, rng::substream(round_seed, "query"), workers)?;
            pool.label(&picked)?;
            queries.push(picked);
        }
        prev = Some(model);
    }
    Ok(ALReport { rows, queries })
}

fn query(pool: &Pool, model: &RoundModel, cfg: &ALConfig, seed: u64, workers: usize) -> Result<Vec<usize>> {
    let p = model.predictor(cfg.mode)?;
    let norm = &model.sensing.normalization;
    let free = pool.unlabeled();
    let data = &pool.dataset.samples;
    if cfg.strategy == Strategy::Badge {
        let emb = with_workers(workers, || {
            free.par_iter()
                .map(|&i| p.badge(&norm.apply_sample(&data[i])))
                .collect::<Result<Vec<_>>>()
        })??;
        return Ok(kmeanspp_select(&emb, cfg.query_batch, seed)?
            .into_iter()
            .map(|j| free[j])
            .collect());
    }
    let scores = with_workers(workers, || {
        free.par_iter()
            .map(|&i| {
                let x = norm.apply_sample(&data[i]);
                let s = match cfg.strategy {
                    Strategy::Entropy => score_entropy(&p.probabilities(&x)?),
                    Strategy::LeastConfidence => score_least_confidence(&p.probabilities(&x)?),
                    Strategy::Margin => score_margin(&p.probabilities(&x)?)?,
                    Strategy::Bald => score_bald(&p.mc_probabilities(&x, cfg.bald_passes, cfg.bald_rate, rng::indexed(seed, i as u64))?)?,
                    Strategy::Badge => unreachable!(),
                };
                Ok((i, s))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(top_k(&scores, cfg.query_batch))
}

/// One AL run per seed, rows concatenated.
pub fn run_repeated(pool: &Pool, test: &LabeledDataset, fit: &FitSpec, cfg: &ALConfig, seeds: &[u64], workers: usize) -> Result<ALReport> {
    let mut out = ALReport {
        rows: Vec::new(),
        queries: Vec::new(),
    };
    for &s in seeds {
        let r = run_active_learning(pool, test, fit, &ALConfig { seed: s, ..cfg.clone() }, workers)?;
        out.rows.extend(r.rows);
        out.queries.extend(r.queries);
    }
    Ok(out)
}
