//! End-to-end runs driven by a [`RunConfig`]: data, fitting, evaluation,
//! active learning and OOD detection, with a hashed output manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active::{run_repeated, ALConfig, ALReport, Pool};
use crate::config::{DataSource, OodSetKind, RunConfig};
use crate::data::{load_csv, load_idx, synth_blobs, synth_glyphs, uniform_noise_images, CorruptionSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::fit::{fit_pipeline, FitSeeds, FittedPipeline};
use crate::hashing::sha256_hex;
use crate::head::save_bundle;
use crate::nn::{save_network, scaled_schedule, TrainReport};
use crate::ood::{run_ood, OodReport};
use crate::rng::{self, stream};

/// Raw train and test sets named by the config.
pub fn load_datasets(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let data_seed = rng::substream(cfg.seed, stream::DATA);
    let (train, test) = match &cfg.data {
        DataSource::Glyphs {
            train_per_class,
            test_per_class,
            glyph,
        } => (
            synth_glyphs(glyph, *train_per_class, rng::indexed(data_seed, 0))?,
            synth_glyphs(glyph, *test_per_class, rng::indexed(data_seed, 1))?,
        ),
        DataSource::Blobs {
            num_classes,
            dim,
            train_per_class,
            test_per_class,
            spread,
        } => {
            // Train and test must share centres, so draw them together.
            let all = synth_blobs(*num_classes, *dim, train_per_class + test_per_class, *spread, data_seed)?;
            let per = num_classes * train_per_class;
            let idx: Vec<usize> = (0..all.len()).collect();
            (all.subset(&idx[..per]), all.subset(&idx[per..]))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?),
        DataSource::Csv { train, test } => (load_csv(train)?, load_csv(test)?),
    };
    if train.shape != test.shape {
        return Err(Error::Shape("train and test sets have different sample shapes".into()));
    }
    let classes = train.num_classes.max(test.num_classes);
    Ok((
        LabeledDataset { num_classes: classes, ..train },
        LabeledDataset { num_classes: classes, ..test },
    ))
}

/// Every configured (kind, severity) pair with a seed from the corruption stream.
pub fn conditions(cfg: &RunConfig) -> Vec<CorruptionSpec> {
    let base = rng::substream(cfg.seed, stream::CORRUPTION);
    let mut out = Vec::new();
    for &kind in &cfg.eval.corruptions {
        for &severity in &cfg.eval.severities {
            out.push(CorruptionSpec {
                kind,
                severity,
                seed: rng::indexed(base, (kind as u64) << 8 | severity as u64),
            });
        }
    }
    out
}

/// Removes class `k` from both sets, renumbering the classes above it, and
/// returns the removed test samples.
pub fn hold_out_class(train: &LabeledDataset, test: &LabeledDataset, k: usize) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    if k >= train.num_classes || train.num_classes < 3 {
        return Err(Error::Config(format!("cannot hold out class {k} of {}", train.num_classes)));
    }
    let remap = |d: &LabeledDataset| {
        let mut kept = d.filter_labels(|y| y != k);
        for y in &mut kept.labels {
            if *y > k {
                *y -= 1;
            }
        }
        kept.num_classes -= 1;
        kept
    };
    Ok((remap(train), remap(test), test.filter_labels(|y| y == k)))
}

/// The named synthetic OOD sets of the config, sized and shaped like `like`.
pub fn ood_sets(cfg: &RunConfig, like: &LabeledDataset) -> Result<Vec<(String, LabeledDataset)>> {
    let seed = rng::substream(cfg.seed, stream::OOD);
    let n = cfg.ood.set_size;
    let mut out = Vec::new();
    for (i, kind) in cfg.ood.sets.iter().enumerate() {
        let s = rng::indexed(seed, i as u64);
        match kind {
            OodSetKind::UniformNoise => out.push(("uniform-noise".to_string(), uniform_noise_images(like.shape, n, s)?)),
            OodSetKind::Blobs => {
                let per = n.div_ceil(4).max(1);
                let mut b = synth_blobs(4, like.shape.len(), per, 0.5, s)?;
                b.samples.truncate(n);
                b.labels.truncate(n);
                if like.shape.is_image() {
                    // Squash into the pixel range of image data.
                    for x in b.samples.iter_mut().flatten() {
                        *x = 1.0 / (1.0 + (-*x).exp());
                    }
                }
                out.push((
                    "blobs".to_string(),
                    LabeledDataset::new(b.samples, vec![0; b.labels.len()], 1, like.shape)?,
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// Every file a run wrote, grouped by stage, with content hashes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub sections: BTreeMap<String, Vec<FileEntry>>,
}

impl Manifest {
    pub fn files(&self) -> impl Iterator<Item = &FileEntry> {
        self.sections.values().flatten()
    }
}

pub const MANIFEST_FORMAT: &str = "introspect-run";
pub const MANIFEST_FILE: &str = "manifest.json";

struct Writer {
    root: PathBuf,
    sections: BTreeMap<String, Vec<FileEntry>>,
}

impl Writer {
    fn write(&mut self, section: &str, rel: &str, body: &[u8]) -> Result<()> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        self.record(section, rel, body);
        Ok(())
    }

    fn record(&mut self, section: &str, rel: &str, body: &[u8]) {
        self.sections.entry(section.to_string()).or_default().push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(body),
        });
    }

    fn record_file(&mut self, section: &str, rel: &str) -> Result<()> {
        let p = self.root.join(rel);
        let body = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.record(section, rel, &body);
        Ok(())
    }
}

pub fn curve_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,lr,loss,accuracy\n");
    for e in &report.curve {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.loss, e.accuracy));
    }
    s
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub fitted: FittedPipeline,
    pub eval: EvalReport,
    pub al: Option<ALReport>,
    pub ood: Option<OodReport>,
    pub manifest: Manifest,
}

/// Runs every stage and writes all outputs under `out`. Errors name the
/// stage that failed.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let workers = cfg.effective_workers();
    let mut w = Writer {
        root: out.to_path_buf(),
        sections: BTreeMap::new(),
    };
    w.write("config", "config.resolved.json", cfg.to_json().as_bytes())?;

    let (mut train, mut test) = load_datasets(cfg).map_err(|e| e.in_stage("data"))?;
    let mut held_out = None;
    if let (false, Some(k)) = (cfg.skip_ood, cfg.ood.held_out_class) {
        let (a, b, c) = hold_out_class(&train, &test, k).map_err(|e| e.in_stage("data"))?;
        train = a;
        test = b;
        held_out = Some(c);
    }

    let ckpt_dir = out.join("checkpoints");
    let mut ckpts = Vec::new();
    let every = cfg.checkpoint_every;
    let fitted = fit_pipeline(&train, &cfg.fit, FitSeeds::from_global(cfg.seed), workers, |stats, net| {
        if every > 0 && stats.epoch % every == 0 {
            let name = format!("sensing_epoch_{:04}.json", stats.epoch);
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            save_network(net, &ckpt_dir.join(&name))?;
            ckpts.push(name);
        }
        Ok(())
    })?;
    for name in &ckpts {
        w.record_file("train", &format!("checkpoints/{name}"))?;
    }
    save_bundle(&fitted.pipeline, &out.join("model")).map_err(|e| e.in_stage("train-head"))?;
    for f in ["model/sensing.json", "model/head.json", "model/bundle.json"] {
        w.record_file("train", f)?;
    }
    w.write("train", "curve_sensing.csv", curve_csv(&fitted.sensing_report).as_bytes())?;
    w.write("train", "curve_head.csv", curve_csv(&fitted.head_report).as_bytes())?;

    let opts = EvalOptions {
        bins: cfg.eval.bins,
        workers,
    };
    let eval = evaluate(&fitted.pipeline, &test, &conditions(cfg), &opts).map_err(|e| e.in_stage("eval"))?;
    w.write("eval", "eval.csv", eval.to_csv().as_bytes())?;
    w.write("eval", "eval_plot.csv", eval.to_plot_csv().as_bytes())?;

    let al = if cfg.skip_al {
        None
    } else {
        let report = run_al(cfg, &train, &test, workers).map_err(|e| e.in_stage("al"))?;
        w.write("al", "al.csv", report.to_csv().as_bytes())?;
        Some(report)
    };

    let ood = if cfg.skip_ood {
        None
    } else {
        let mut sets = ood_sets(cfg, &test).map_err(|e| e.in_stage("ood"))?;
        if let Some(c) = held_out {
            sets.push(("held-out-class".to_string(), c));
        }
        let report = run_ood(&fitted.pipeline, &test, &sets, &cfg.ood.scoring, workers).map_err(|e| e.in_stage("ood"))?;
        w.write("ood", "ood.csv", report.to_csv().as_bytes())?;
        Some(report)
    };

    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        seed: cfg.seed,
        sections: w.sections,
    };
    let p = out.join(MANIFEST_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest serialises")).map_err(|e| Error::io(&p, e))?;
    Ok(RunOutcome {
        fitted,
        eval,
        al,
        ood,
        manifest,
    })
}

/// Every configured strategy and mode, with the pool drawn from `train`.
pub fn run_al(cfg: &RunConfig, train: &LabeledDataset, test: &LabeledDataset, workers: usize) -> Result<ALReport> {
    let pool = Pool::new(train.clone());
    let mut fit = cfg.fit.clone();
    fit.train_sense.lr_schedule = scaled_schedule(fit.train_sense.epochs.max(1), cfg.al.sense_lr);
    let base = rng::substream(cfg.seed, stream::AL);
    let seeds: Vec<u64> = (0..cfg.al.repeat as u64).map(|i| rng::indexed(base, i)).collect();
    let mut out = ALReport {
        rows: Vec::new(),
        queries: Vec::new(),
    };
    for &strategy in &cfg.al.strategies {
        for &mode in &cfg.al.modes {
            let al = ALConfig {
                strategy,
                mode,
                rounds: cfg.al.rounds,
                query_batch: cfg.al.query_batch,
                initial_random: cfg.al.initial_random,
                seed: 0,
                bald_passes: cfg.al.bald_passes,
                bald_rate: cfg.al.bald_rate,
                warm_start: cfg.al.warm_start,
                corrupted_severity: cfg.al.corrupted_severity,
                min_steps: cfg.al.min_steps,
            };
            let r = run_repeated(&pool, test, &fit, &al, &seeds, workers)?;
            out.rows.extend(r.rows);
            out.queries.extend(r.queries);
        }
    }
    Ok(out)
}
