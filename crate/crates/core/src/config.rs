//! Run configuration shared by the pipeline and the command-line front end.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active::Strategy;
use crate::data::{CorruptionKind, GlyphConfig};
use crate::error::{Error, Result};
use crate::fit::FitSpec;
use crate::head::Mode;
use crate::metrics::BinConfidence;
use crate::nn::TrainConfig;
use crate::ood::OodConfig;

/// Where the train and test sets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Glyphs {
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default)]
        glyph: GlyphConfig,
    },
    Blobs {
        num_classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Glyphs {
            train_per_class: 400,
            test_per_class: 100,
            glyph: GlyphConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub bins: BinConfidence,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            corruptions: CorruptionKind::ALL.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            bins: BinConfidence::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlSection {
    pub strategies: Vec<Strategy>,
    pub modes: Vec<Mode>,
    pub rounds: usize,
    pub query_batch: usize,
    pub initial_random: usize,
    pub bald_passes: usize,
    pub bald_rate: f64,
    pub warm_start: bool,
    pub corrupted_severity: u8,
    pub min_steps: usize,
    /// Initial sensing-network learning rate for the rounds. Small labeled
    /// sets trained for many steps occasionally stall at the full-data rate.
    pub sense_lr: f64,
    /// Number of seeds; each emits its own rows.
    pub repeat: usize,
}

impl Default for AlSection {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Margin],
            modes: Mode::BOTH.to_vec(),
            rounds: 10,
            query_batch: 200,
            initial_random: 100,
            bald_passes: 10,
            bald_rate: 0.3,
            warm_start: false,
            corrupted_severity: 3,
            min_steps: 1500,
            sense_lr: 0.05,
            repeat: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodSetKind {
    /// Uniform noise in the input range.
    UniformNoise,
    /// Gaussian blobs, a differently distributed synthetic set.
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSection {
    pub sets: Vec<OodSetKind>,
    pub set_size: usize,
    /// Class withheld from training and used as a near-OOD set.
    pub held_out_class: Option<usize>,
    pub scoring: OodConfig,
}

impl Default for OodSection {
    fn default() -> Self {
        Self {
            sets: vec![OodSetKind::UniformNoise, OodSetKind::Blobs],
            set_size: 1000,
            held_out_class: None,
            scoring: OodConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// 0 uses every available core.
    pub workers: usize,
    pub data: DataSource,
    pub fit: FitSpec,
    pub eval: EvalSection,
    pub al: AlSection,
    pub ood: OodSection,
    /// Write a sensing-network checkpoint every k epochs (0 disables).
    pub checkpoint_every: usize,
    pub skip_al: bool,
    pub skip_ood: bool,
}

/// The desk-scale MNIST-style configuration: 4000 synthetic 28x28 glyphs of
/// which a quarter is kept away from the sensing network for the head,
/// a 784-256-50-10 sensing network and a 500-300-100-10 head, 30 epochs each.
impl Default for RunConfig {
    fn default() -> Self {
        let mut fit = FitSpec {
            train_head: TrainConfig {
                weight_decay: 5e-4,
                ..TrainConfig::head_default()
            },
            held_out_fraction: 0.25,
            ..FitSpec::default()
        }
        .with_epochs(30, 30);
        fit.train_sense.batch_size = 64;
        fit.train_head.batch_size = 32;
        Self {
            seed: 7,
            out_dir: PathBuf::from("out"),
            workers: 0,
            data: DataSource::default(),
            fit,
            eval: EvalSection::default(),
            al: AlSection::default(),
            ood: OodSection::default(),
            checkpoint_every: 0,
            skip_al: false,
            skip_ood: false,
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when `origin` ends in `.json`. Keys left out at
    /// any depth keep their `RunConfig::default()` value.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let json = origin.ends_with(".json");
        // On failure the direct typed parse gives the message, since it knows line numbers.
        let located = || -> Error {
            let e = if json {
                serde_json::from_str::<RunConfig>(text).err().map(|e| format!("line {}: {e}", e.line()))
            } else {
                toml::from_str::<RunConfig>(text).err().map(|e| e.to_string())
            };
            Error::Config(format!("{origin}: {}", e.unwrap_or_else(|| "invalid configuration".into())))
        };
        let given = if json {
            serde_json::from_str::<serde_json::Value>(text).ok()
        } else {
            toml::from_str::<toml::Table>(text).ok().and_then(|t| serde_json::to_value(t).ok())
        }
        .ok_or_else(located)?;
        let mut merged = serde_json::to_value(RunConfig::default()).expect("config serialises");
        overlay(&mut merged, given);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| match located() {
            Error::Config(m) if m.ends_with("invalid configuration") => Error::Config(format!("{origin}: {e}")),
            located => located,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.train_sense.validate().map_err(|e| Error::Config(format!("fit.train_sense: {e}")))?;
        self.fit.train_head.validate().map_err(|e| Error::Config(format!("fit.train_head: {e}")))?;
        if !(0.0..1.0).contains(&self.fit.held_out_fraction) {
            return Err(Error::Config("fit.held_out_fraction must be in [0, 1)".into()));
        }
        if let Some(&s) = self.eval.severities.iter().find(|&&s| !(1..=5).contains(&s)) {
            return Err(Error::Config(format!("eval.severities: {s} is outside 1..=5")));
        }
        if !(1..=5).contains(&self.al.corrupted_severity) {
            return Err(Error::Config("al.corrupted_severity must be in 1..=5".into()));
        }
        if !(self.al.sense_lr > 0.0 && self.al.sense_lr.is_finite()) {
            return Err(Error::Config("al.sense_lr must be positive".into()));
        }
        if self.al.repeat == 0 {
            return Err(Error::Config("al.repeat must be at least 1".into()));
        }
        if !(self.ood.scoring.temperature > 0.0) {
            return Err(Error::Config("ood.scoring.temperature must be positive".into()));
        }
        Ok(())
    }

    /// Pretty JSON of the fully resolved configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn effective_workers(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            self.workers
        }
    }
}

/// Recursively writes `top` over `base`. A table that switches the data
/// `source` replaces the base table, since the variants share no fields.
fn overlay(base: &mut serde_json::Value, top: serde_json::Value) {
    use serde_json::Value;
    match (base, top) {
        (Value::Object(b), Value::Object(t)) if b.get("source").is_none_or(|s| t.get("source").is_none_or(|ts| ts == s)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}
