use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{loss_and_logit_grad, one_hot, softmax, GradientSet, LossSpec, Network};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Mini-batch SGD settings. `lr_schedule` holds `(first_epoch, lr)` pairs
/// with 1-based epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: scaled_schedule(200, 0.1),
            batch_size: 128,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

/// The step schedule `lr, lr/5, lr/25, lr/125` switching at 30%, 60% and 80%
/// of training. For 200 epochs this is epochs 1/61/121/161.
pub fn scaled_schedule(epochs: usize, lr: f64) -> Vec<(usize, f64)> {
    let mut out = vec![(1, lr)];
    let mut cur = lr;
    for frac in [0.3, 0.6, 0.8] {
        cur /= 5.0;
        let start = (epochs as f64 * frac).round() as usize + 1;
        if start > out.last().unwrap().0 {
            out.push((start, cur));
        }
    }
    out
}

impl TrainConfig {
    /// Defaults for the second-stage head (heavier weight decay).
    pub fn head_default() -> Self {
        Self {
            weight_decay: 5e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 1 {
            return Err(Error::Parameter("lr_schedule must start at epoch 1".into()));
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Parameter("lr_schedule epochs must be strictly increasing".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter("dropout_rate must be in [0,1)".into()));
        }
        if self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Parameter("momentum and weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(start, _)| *start <= epoch)
            .last()
            .map(|&(_, lr)| lr)
            .unwrap_or(self.lr_schedule[0].1)
    }
}

/// SGD with heavy-ball momentum and decoupled-from-bias L2 weight decay:
/// `v = mu v + g + wd w; w -= lr v` for weights and `v = mu v + g; b -= lr v`
/// for biases.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: GradientSet,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: GradientSet::zeros(net),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &GradientSet, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (l, layer) in net.layers_mut().iter_mut().enumerate() {
            let vw = &mut self.velocity.weights[l];
            for ((w, v), g) in layer.weights.iter_mut().zip(vw.iter_mut()).zip(&grads.weights[l]) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
            let vb = &mut self.velocity.biases[l];
            for ((b, v), g) in layer.bias.iter_mut().zip(vb.iter_mut()).zip(&grads.biases[l]) {
                *v = mu * *v + g;
                *b -= lr * *v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochStats>,
}

pub fn train(net: &mut Network, samples: &[Vec<f64>], labels: &[usize], loss: &LossSpec, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(net, samples, labels, loss, cfg, |_, _| Ok(()))
}

/// Trains in place, calling `on_epoch` after every epoch (used for
/// checkpoint sweeps).
pub fn train_with<F>(
    net: &mut Network,
    samples: &[Vec<f64>],
    labels: &[usize],
    loss: &LossSpec,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    F: FnMut(&EpochStats, &Network) -> Result<()>,
{
    cfg.validate()?;
    loss.validate()?;
    if samples.is_empty() {
        return Err(Error::Parameter("cannot train on an empty dataset".into()));
    }
    if samples.len() != labels.len() {
        return Err(Error::Shape(format!("{} samples but {} labels", samples.len(), labels.len())));
    }
    let n_classes = net.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Parameter(format!("label {bad} out of range for {n_classes} classes")));
    }
    if let Some(s) = samples.iter().find(|s| s.len() != net.input_dim()) {
        return Err(Error::Shape(format!("sample length {} != input dim {}", s.len(), net.input_dim())));
    }

    let mut rng: Rng = rng::rng(cfg.seed);
    let mut sgd = Sgd::new(net, cfg.momentum, cfg.weight_decay);
    let mut grads = GradientSet::zeros(net);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let targets: Vec<Vec<f64>> = (0..n_classes).map(|c| one_hot(n_classes, c)).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in batch {
                let trace = net.forward_dropout(&samples[i], cfg.dropout_rate, &mut rng)?;
                let (l, dz) = loss_and_logit_grad(loss, trace.logits(), &targets[labels[i]])
                    .map_err(|_| Error::Divergence { epoch, loss: f64::NAN })?;
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch, loss: l });
                }
                total_loss += l;
                if argmax(trace.logits()) == labels[i] {
                    correct += 1;
                }
                net.backward_into(&trace, &dz, &mut grads, false)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd.step(net, &grads, lr);
        }
        let stats = EpochStats {
            epoch,
            lr,
            loss: total_loss / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        };
        if !stats.loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: stats.loss });
        }
        report.curve.push(stats);
        on_epoch(&stats, net)?;
    }
    Ok(report)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `passes` softmax outputs under independent dropout masks drawn from `seed`.
pub fn forward_mc_dropout(net: &Network, x: &[f64], passes: usize, rate: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if passes == 0 {
        return Err(Error::Parameter("need at least one MC pass".into()));
    }
    let mut rng = rng::rng(seed);
    (0..passes)
        .map(|_| net.forward_dropout(x, rate, &mut rng).map(|t| softmax(t.logits())))
        .collect()
}
