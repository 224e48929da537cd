//! The second-stage introspective head and the combined two-stage pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::introspection::{extract_fast, IntrospectiveFeature, SCALE_CONVENTION};
use crate::metrics::Prediction;
use crate::nn::{self, network_to_json, Activation, LossSpec, Network, NetworkFile, TrainConfig, TrainReport};
use crate::rng::Rng;

/// Which predictor a harness scores: the sensing network alone or the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    FeedForward,
    Introspective,
}

impl Mode {
    pub const BOTH: [Mode; 2] = [Mode::FeedForward, Mode::Introspective];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FeedForward => "feed-forward",
            Mode::Introspective => "introspective",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Default hidden widths of the head.
pub const DEFAULT_HEAD_HIDDEN: [usize; 2] = [300, 100];

/// MLP over vectorised introspective features with sigmoid hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrospectiveHead {
    pub network: Network,
    pub hidden_dims: Vec<usize>,
}

/// Builds a `d*N -> hidden... -> N` head. An empty `hidden` gives a single
/// linear map.
pub fn build_head(penultimate_dim: usize, num_classes: usize, hidden: &[usize], rng: &mut Rng) -> Result<IntrospectiveHead> {
    if penultimate_dim == 0 || num_classes == 0 {
        return Err(Error::Parameter("head dimensions must be positive".into()));
    }
    let mut dims = vec![penultimate_dim * num_classes];
    dims.extend_from_slice(hidden);
    dims.push(num_classes);
    Ok(IntrospectiveHead {
        network: Network::random(&dims, Activation::Sigmoid, rng)?,
        hidden_dims: hidden.to_vec(),
    })
}

impl IntrospectiveHead {
    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn from_network(network: Network) -> Self {
        let dims = network.dims();
        let hidden_dims = dims[1..dims.len() - 1].to_vec();
        Self { network, hidden_dims }
    }

    pub fn predict(&self, feature: &IntrospectiveFeature) -> Result<Prediction> {
        Ok(Prediction::from_logits(&self.network.logits(feature.vectorized())?))
    }
}

/// Trains the head on vectorised features. `loss` is the head's own
/// classification loss, independent of the extraction loss.
pub fn train_head(head: &mut IntrospectiveHead, features: &[Vec<f64>], labels: &[usize], loss: &LossSpec, cfg: &TrainConfig) -> Result<TrainReport> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} features but {} labels", features.len(), labels.len())));
    }
    nn::train(&mut head.network, features, labels, loss, cfg)
}

/// Sensing network, extraction loss and head, plus the input standardisation
/// applied to raw samples before the sensing network.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStagePipeline {
    pub sensing: Network,
    pub loss: LossSpec,
    pub head: IntrospectiveHead,
    pub normalization: Normalization,
}

impl TwoStagePipeline {
    pub fn new(sensing: Network, loss: LossSpec, head: IntrospectiveHead, normalization: Normalization) -> Result<Self> {
        let want = sensing.penultimate_dim() * sensing.num_classes();
        if head.input_dim() != want {
            return Err(Error::Shape(format!("head expects {} inputs, sensing network yields {want}", head.input_dim())));
        }
        if head.network.num_classes() != sensing.num_classes() {
            return Err(Error::Shape("head and sensing network disagree on class count".into()));
        }
        loss.validate()?;
        Ok(Self {
            sensing,
            loss,
            head,
            normalization,
        })
    }

    pub fn prepare(&self, raw: &[f64]) -> Vec<f64> {
        self.normalization.apply_sample(raw)
    }

    pub fn feed_forward(&self, x: &[f64]) -> Result<Prediction> {
        Ok(Prediction::from_logits(&self.sensing.logits(x)?))
    }

    pub fn introspective(&self, x: &[f64]) -> Result<Prediction> {
        self.head.predict(&extract_fast(&self.sensing, x, &self.loss)?)
    }

    pub fn predict(&self, mode: Mode, x: &[f64]) -> Result<Prediction> {
        match mode {
            Mode::FeedForward => self.feed_forward(x),
            Mode::Introspective => self.introspective(x),
        }
    }

    /// Logits of the chosen predictor.
    pub fn logits(&self, mode: Mode, x: &[f64]) -> Result<Vec<f64>> {
        match mode {
            Mode::FeedForward => self.sensing.logits(x),
            Mode::Introspective => {
                let f = extract_fast(&self.sensing, x, &self.loss)?;
                self.head.network.logits(f.vectorized())
            }
        }
    }
}

/// Both predictions for a (normalised) input. The extraction target is
/// always the all-ones vector; labels are never consulted.
pub fn predict_two_stage(pipeline: &TwoStagePipeline, x: &[f64]) -> Result<(Prediction, Prediction)> {
    let trace = pipeline.sensing.forward(x)?;
    let ff = Prediction::from_logits(trace.logits());
    let intro = pipeline.introspective(x)?;
    Ok((ff, intro))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub version: u32,
    pub loss: LossSpec,
    pub scale_convention: String,
    pub layout: String,
    pub normalization: Normalization,
    pub sensing_checkpoint: String,
    pub sensing_sha256: String,
    pub head_checkpoint: String,
    pub head_sha256: String,
    pub head_hidden: Vec<usize>,
}

pub const BUNDLE_FORMAT: &str = "introspect-pipeline";
pub const BUNDLE_MANIFEST: &str = "bundle.json";

/// Writes `sensing.json`, `head.json` and `bundle.json` into `dir`.
pub fn save_bundle(pipeline: &TwoStagePipeline, dir: &Path) -> Result<BundleManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sensing = network_to_json(&pipeline.sensing);
    let head = network_to_json(&pipeline.head.network);
    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.into(),
        version: 1,
        loss: pipeline.loss,
        scale_convention: SCALE_CONVENTION.into(),
        layout: "column-major".into(),
        normalization: pipeline.normalization.clone(),
        sensing_checkpoint: "sensing.json".into(),
        sensing_sha256: sha256_hex(sensing.as_bytes()),
        head_checkpoint: "head.json".into(),
        head_sha256: sha256_hex(head.as_bytes()),
        head_hidden: pipeline.head.hidden_dims.clone(),
    };
    for (name, body) in [("sensing.json", &sensing), ("head.json", &head)] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(BUNDLE_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

pub fn parse_bundle_manifest(bytes: &[u8], origin: &str) -> Result<BundleManifest> {
    let m: BundleManifest = serde_json::from_slice(bytes).map_err(|e| Error::format(origin, e.line() as u64, e.to_string()))?;
    if m.format != BUNDLE_FORMAT {
        return Err(Error::format(origin, 0, format!("unexpected bundle format `{}`", m.format)));
    }
    m.loss.validate()?;
    Ok(m)
}

pub fn load_bundle(dir: &Path) -> Result<TwoStagePipeline> {
    let p = dir.join(BUNDLE_MANIFEST);
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let m = parse_bundle_manifest(&bytes, &p.display().to_string())?;
    let load = |name: &str, hash: &str| -> Result<Network> {
        let path = dir.join(name);
        let body = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&body) != hash {
            return Err(Error::format(path.display(), 0, "content hash does not match bundle manifest"));
        }
        NetworkFile::parse(&body, &path.display().to_string())
    };
    let sensing = load(&m.sensing_checkpoint, &m.sensing_sha256)?;
    let head = IntrospectiveHead::from_network(load(&m.head_checkpoint, &m.head_sha256)?);
    TwoStagePipeline::new(sensing, m.loss, head, m.normalization)
}
