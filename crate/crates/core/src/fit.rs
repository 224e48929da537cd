//! Training the full two-stage pipeline from a raw training set.

use serde::{Deserialize, Serialize};

use crate::data::{normalize, LabeledDataset, Normalization};
use crate::error::{Error, Result};
use crate::eval::with_workers;
use crate::head::{build_head, train_head, IntrospectiveHead, TwoStagePipeline};
use crate::introspection::{extract_batch, mean_max_logit};
use crate::nn::{self, scaled_schedule, Activation, EpochStats, LossSpec, Network, TrainConfig, TrainReport};
use crate::rng::{self, stream};

/// Which loss the extraction stage backpropagates. `M` for MSE-M is
/// measured on the sensing network's training set unless overridden.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionLoss {
    Ce,
    #[default]
    MseM,
}

impl std::str::FromStr for ExtractionLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(ExtractionLoss::Ce),
            "mse-m" => Ok(ExtractionLoss::MseM),
            _ => Err(Error::Config(format!("unknown loss `{s}` (expected ce or mse-m)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSpec {
    /// Hidden widths of the sensing network; the last one is the penultimate width.
    pub sensing_hidden: Vec<usize>,
    pub sensing_activation: Activation,
    pub train_sense: TrainConfig,
    pub extraction: ExtractionLoss,
    pub m_override: Option<f64>,
    pub head_hidden: Vec<usize>,
    pub train_head: TrainConfig,
    /// The head's own training loss.
    pub head_loss: ExtractionLoss,
    /// Fraction of the training set withheld from the sensing network and
    /// used only for the head. 0 trains both on the same data.
    pub held_out_fraction: f64,
}

impl Default for FitSpec {
    fn default() -> Self {
        Self {
            sensing_hidden: vec![256, 50],
            sensing_activation: Activation::Relu,
            train_sense: TrainConfig::default(),
            extraction: ExtractionLoss::MseM,
            m_override: None,
            head_hidden: vec![300, 100],
            train_head: TrainConfig::head_default(),
            head_loss: ExtractionLoss::Ce,
            held_out_fraction: 0.0,
        }
    }
}

impl FitSpec {
    /// Same settings with both schedules shortened to `epochs`.
    pub fn with_epochs(mut self, sense_epochs: usize, head_epochs: usize) -> Self {
        let lr_f = self.train_sense.lr_schedule[0].1;
        let lr_h = self.train_head.lr_schedule[0].1;
        self.train_sense.epochs = sense_epochs;
        self.train_sense.lr_schedule = scaled_schedule(sense_epochs.max(1), lr_f);
        self.train_head.epochs = head_epochs;
        self.train_head.lr_schedule = scaled_schedule(head_epochs.max(1), lr_h);
        self
    }
}

#[derive(Debug, Clone)]
pub struct FittedPipeline {
    pub pipeline: TwoStagePipeline,
    pub sensing_report: TrainReport,
    pub head_report: TrainReport,
    pub head_train_size: usize,
}

/// Seeds for a fit derived from one global seed.
#[derive(Debug, Clone, Copy)]
pub struct FitSeeds {
    pub init_f: u64,
    pub train_f: u64,
    pub init_h: u64,
    pub train_h: u64,
}

impl FitSeeds {
    pub fn from_global(seed: u64) -> Self {
        let init = rng::substream(seed, stream::INIT);
        Self {
            init_f: rng::substream(init, stream::TRAIN_F),
            train_f: rng::substream(seed, stream::TRAIN_F),
            init_h: rng::substream(init, stream::TRAIN_H),
            train_h: rng::substream(seed, stream::TRAIN_H),
        }
    }
}

pub fn head_loss_spec(kind: ExtractionLoss) -> LossSpec {
    match kind {
        ExtractionLoss::Ce => LossSpec::CrossEntropy,
        // The head's own MSE target keeps unit scale.
        ExtractionLoss::MseM => LossSpec::MseM { m: 1.0 },
    }
}

pub fn new_sensing(input_dim: usize, num_classes: usize, spec: &FitSpec, seed: u64) -> Result<Network> {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(&spec.sensing_hidden);
    dims.push(num_classes);
    Network::random(&dims, spec.sensing_activation, &mut rng::rng(seed))
}

/// A trained sensing network with its input standardisation and the
/// extraction loss (with `M` measured on its training set).
#[derive(Debug, Clone)]
pub struct SensingFit {
    pub network: Network,
    pub normalization: Normalization,
    pub loss: LossSpec,
    pub report: TrainReport,
}

/// Fits normalisation on `train_raw` and trains a sensing network, starting
/// from `init` when given (warm start) or a fresh seeded initialisation.
pub fn fit_sensing<F>(train_raw: &LabeledDataset, spec: &FitSpec, seeds: FitSeeds, init: Option<&Network>, on_epoch: F) -> Result<SensingFit>
where
    F: FnMut(&EpochStats, &Network) -> Result<()>,
{
    if train_raw.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let normalization = Normalization::fit(train_raw)?;
    let train = normalize(train_raw, &normalization)?;
    let mut network = match init {
        Some(net) => net.clone(),
        None => new_sensing(train.shape.len(), train_raw.num_classes, spec, seeds.init_f)?,
    };
    let mut cfg = spec.train_sense.clone();
    cfg.seed = seeds.train_f;
    let report = nn::train_with(&mut network, &train.samples, &train.labels, &LossSpec::CrossEntropy, &cfg, on_epoch)
        .map_err(|e| e.in_stage("train-sense"))?;
    let loss = match spec.extraction {
        ExtractionLoss::Ce => LossSpec::CrossEntropy,
        ExtractionLoss::MseM => LossSpec::MseM {
            m: match spec.m_override {
                Some(m) => m,
                None => mean_max_logit(&network, &train.samples)?,
            },
        },
    };
    loss.validate().map_err(|e| e.in_stage("extract"))?;
    Ok(SensingFit {
        network,
        normalization,
        loss,
        report,
    })
}

/// Extracts features of `head_raw` through a fitted sensing network and
/// trains a head on them.
pub fn fit_head(sensing: &SensingFit, head_raw: &LabeledDataset, spec: &FitSpec, seeds: FitSeeds, workers: usize, init: Option<&IntrospectiveHead>) -> Result<(IntrospectiveHead, TrainReport)> {
    let h_train = normalize(head_raw, &sensing.normalization)?;
    let feats = with_workers(workers, || extract_batch(&sensing.network, &h_train.samples, &sensing.loss, workers))?
        .map_err(|e| e.in_stage("extract"))?;
    let feats: Vec<Vec<f64>> = feats.into_iter().map(|f| f.into_vec()).collect();
    let mut head = match init {
        Some(h) => h.clone(),
        None => build_head(
            sensing.network.penultimate_dim(),
            sensing.network.num_classes(),
            &spec.head_hidden,
            &mut rng::rng(seeds.init_h),
        )?,
    };
    let mut cfg = spec.train_head.clone();
    cfg.seed = seeds.train_h;
    let report = train_head(&mut head, &feats, &h_train.labels, &head_loss_spec(spec.head_loss), &cfg)
        .map_err(|e| e.in_stage("train-head"))?;
    Ok((head, report))
}

/// Fits normalisation, trains the sensing network, measures `M`, extracts
/// features and trains the head. `on_epoch` sees every sensing-network epoch.
pub fn fit_pipeline<F>(train_raw: &LabeledDataset, spec: &FitSpec, seeds: FitSeeds, workers: usize, on_epoch: F) -> Result<FittedPipeline>
where
    F: FnMut(&EpochStats, &Network) -> Result<()>,
{
    if train_raw.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let (f_raw, h_raw) = if spec.held_out_fraction > 0.0 {
        let (a, b) = train_raw.split_tail(spec.held_out_fraction)?;
        if a.is_empty() || b.is_empty() {
            return Err(Error::Parameter("held-out split leaves an empty side".into()));
        }
        (a, Some(b))
    } else {
        (train_raw.clone(), None)
    };
    let sensing = fit_sensing(&f_raw, spec, seeds, None, on_epoch)?;
    let h_raw = h_raw.as_ref().unwrap_or(&f_raw);
    let (head, head_report) = fit_head(&sensing, h_raw, spec, seeds, workers, None)?;
    Ok(FittedPipeline {
        head_train_size: h_raw.len(),
        pipeline: TwoStagePipeline::new(sensing.network, sensing.loss, head, sensing.normalization)?,
        sensing_report: sensing.report,
        head_report,
    })
}
