//! Batch front end for the introspection library.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use introspect::active::Strategy;
use introspect::bench::benchmark;
use introspect::config::RunConfig;
use introspect::data::{load_csv, normalize, LabeledDataset, Normalization};
use introspect::eval::{evaluate, EvalOptions};
use introspect::fit::{fit_sensing, ExtractionLoss, FitSeeds, SensingFit};
use introspect::hashing::sha256_hex;
use introspect::head::{build_head, load_bundle, save_bundle, train_head, Mode, TwoStagePipeline};
use introspect::introspection::{
    extract_batch, extract_exact, fisher_variance, mean_max_logit, read_feature_table, sparsity_report, write_feature_table, FeatureSidecar,
    DEFAULT_RIDGE, SCALE_CONVENTION,
};
use introspect::metrics::BinConfidence;
use introspect::nn::{argmax, load_network, save_network, LossSpec, Network};
use introspect::ood::run_ood;
use introspect::pipeline::{conditions, curve_csv, load_datasets, ood_sets, run_al, run_pipeline};
use introspect::rng::{self, stream};
use introspect::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "introspect", version, about = "Two-stage introspective inference")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Extraction loss.
    #[arg(long, global = true, value_parser = ["ce", "mse-m"])]
    loss: Option<String>,
    #[arg(long, global = true)]
    held_out_fraction: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the sensing network.
    TrainSense {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Write introspective features of a dataset.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV dataset; defaults to the head's share of the configured training set.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Use the configured test set instead of the training set.
        #[arg(long)]
        test: bool,
        /// Also run the per-class oracle and report the largest deviation.
        #[arg(long)]
        oracle: bool,
    },
    /// Train the head on a feature table and write a model bundle.
    TrainHead {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a bundle on clean and corrupted test data.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Use bin midpoints instead of mean confidence in ECE/MCE.
        #[arg(long)]
        bin_midpoint: bool,
    },
    /// Active-learning runs.
    Al {
        #[arg(long)]
        strategy: Vec<String>,
        #[arg(long)]
        mode: Vec<String>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        query_batch: Option<usize>,
        #[arg(long)]
        initial: Option<usize>,
        #[arg(long)]
        repeat: Option<usize>,
        #[arg(long)]
        warm_start: bool,
    },
    /// Out-of-distribution detection with MSP and ODIN.
    Ood {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        adversarial: bool,
    },
    /// Sparsity and Fisher reports for a bundle.
    Diag {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = DEFAULT_RIDGE)]
        ridge: f64,
    },
    /// Time the per-class oracle against single-pass extraction.
    Benchmark {
        /// Sensing checkpoint; a seeded random network when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        probes: usize,
        /// Class count of the random network.
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Run every stage and write a hashed manifest.
    Pipeline {
        #[arg(long)]
        skip_al: bool,
        #[arg(long)]
        skip_ood: bool,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
}

/// Everything train-sense writes next to the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SensingMeta {
    normalization: Normalization,
    mean_max_logit: f64,
    train_accuracy: f64,
    test_accuracy: f64,
    checkpoint_sha256: String,
}

const META_FILE: &str = "sensing_meta.json";

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(l) = &common.loss {
        cfg.fit.extraction = l.parse()?;
    }
    if let Some(h) = common.held_out_fraction {
        cfg.fit.held_out_fraction = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path.display(), e.line() as u64, e.to_string()))
}

fn accuracy(net: &Network, data: &LabeledDataset) -> Result<f64> {
    let mut hits = 0;
    for (x, &y) in data.samples.iter().zip(&data.labels) {
        hits += (argmax(&net.logits(x)?) == y) as usize;
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Training split of the sensing network under the configured held-out fraction.
fn sensing_split(cfg: &RunConfig, train: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset)> {
    if cfg.fit.held_out_fraction > 0.0 {
        train.split_tail(cfg.fit.held_out_fraction)
    } else {
        Ok((train.clone(), train.clone()))
    }
}

fn extraction_loss(cfg: &RunConfig, meta: Option<&SensingMeta>) -> Result<LossSpec> {
    match cfg.fit.extraction {
        ExtractionLoss::Ce => Ok(LossSpec::CrossEntropy),
        ExtractionLoss::MseM => {
            let m = cfg
                .fit
                .m_override
                .or(meta.map(|m| m.mean_max_logit))
                .ok_or_else(|| Error::Config(format!("mse-m needs {META_FILE} next to the checkpoint or fit.m_override")))?;
            Ok(LossSpec::MseM { m })
        }
    }
}

fn load_meta(checkpoint: &Path) -> Result<Option<SensingMeta>> {
    let p = checkpoint.with_file_name(META_FILE);
    if p.exists() {
        read_json(&p).map(Some)
    } else {
        Ok(None)
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let out = cfg.out_dir.clone();
    let workers = cfg.effective_workers();
    match cli.cmd {
        Command::TrainSense { epochs, checkpoint_every } => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                let head_epochs = cfg.fit.train_head.epochs;
                cfg.fit = cfg.fit.clone().with_epochs(e, head_epochs);
            }
            let every = checkpoint_every.unwrap_or(cfg.checkpoint_every);
            write(&out.join("config.resolved.json"), cfg.to_json())?;
            let (train, test) = load_datasets(&cfg)?;
            let (f_train, _) = sensing_split(&cfg, &train)?;
            let ckpt = out.join("checkpoints");
            let fit = fit_sensing(&f_train, &cfg.fit, FitSeeds::from_global(cfg.seed), None, |s, net| {
                if every > 0 && s.epoch % every == 0 {
                    save_network(net, &ckpt.join(format!("sensing_epoch_{:04}.json", s.epoch)))?;
                }
                Ok(())
            })?;
            let SensingFit {
                network,
                normalization,
                report,
                ..
            } = fit;
            let path = out.join("sensing.json");
            save_network(&network, &path)?;
            let norm_train = normalize(&f_train, &normalization)?;
            let meta = SensingMeta {
                mean_max_logit: mean_max_logit(&network, &norm_train.samples)?,
                train_accuracy: accuracy(&network, &norm_train)?,
                test_accuracy: accuracy(&network, &normalize(&test, &normalization)?)?,
                checkpoint_sha256: sha256_hex(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?),
                normalization,
            };
            write(&out.join(META_FILE), to_json(&meta))?;
            write(&out.join("curve_sensing.csv"), curve_csv(&report))?;
            println!("test_accuracy={}", meta.test_accuracy);
            println!("checkpoint_sha256={}", meta.checkpoint_sha256);
        }
        Command::Extract {
            checkpoint,
            dataset,
            test,
            oracle,
        } => {
            let net = load_network(&checkpoint)?;
            let meta = load_meta(&checkpoint)?;
            let loss = extraction_loss(&cfg, meta.as_ref())?;
            let raw = match dataset {
                Some(p) => load_csv(&p)?,
                None => {
                    let (a, b) = load_datasets(&cfg)?;
                    if test {
                        b
                    } else {
                        sensing_split(&cfg, &a)?.1
                    }
                }
            };
            if !raw.is_empty() && raw.shape.len() != net.input_dim() {
                return Err(Error::Shape(format!(
                    "dataset samples have {} values, checkpoint expects {}",
                    raw.shape.len(),
                    net.input_dim()
                )));
            }
            let norm = meta.map(|m| m.normalization).unwrap_or_else(|| Normalization::identity(raw.shape.channels()));
            let data = if raw.is_empty() { raw } else { normalize(&raw, &norm)? };
            let feats = extract_batch(&net, &data.samples, &loss, workers)?;
            let ckpt_bytes = std::fs::read(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
            let sidecar = FeatureSidecar {
                penultimate_dim: net.penultimate_dim(),
                num_classes: net.num_classes(),
                loss: loss.name().to_string(),
                m: match loss {
                    LossSpec::MseM { m } => Some(m),
                    LossSpec::CrossEntropy => None,
                },
                scale_convention: SCALE_CONVENTION.to_string(),
                layout: "column-major".to_string(),
                rows: feats.len(),
                source_checkpoint_sha256: sha256_hex(&ckpt_bytes),
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_feature_table(&out.join("features.csv"), &out.join("features.json"), &feats, &data.labels, &sidecar)?;
            println!("rows={}", feats.len());
            if oracle {
                let mut dev = 0.0f64;
                for (x, f) in data.samples.iter().zip(&feats) {
                    for (j, col) in extract_exact(&net, x, &loss)?.iter().enumerate() {
                        for (i, v) in col.iter().enumerate() {
                            dev = dev.max((v - f.get(i, j) * f.scale_factor()).abs());
                        }
                    }
                }
                write(&out.join("oracle.json"), to_json(&serde_json::json!({ "max_deviation": dev, "rows": feats.len() })))?;
                println!("max_deviation={dev:e}");
            }
        }
        Command::TrainHead {
            features,
            checkpoint,
            epochs,
        } => {
            let sensing = load_network(&checkpoint)?;
            let meta = load_meta(&checkpoint)?;
            let (sidecar, feats, labels) = read_feature_table(&features, &features.with_extension("json"))?;
            let ckpt_bytes = std::fs::read(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
            if sidecar.source_checkpoint_sha256 != sha256_hex(&ckpt_bytes) {
                return Err(Error::Config("feature table was extracted from a different checkpoint".into()));
            }
            let loss = match sidecar.m {
                Some(m) => LossSpec::MseM { m },
                None => LossSpec::CrossEntropy,
            };
            let mut fit = cfg.fit.clone();
            if let Some(e) = epochs {
                let sense_epochs = fit.train_sense.epochs;
                fit = fit.with_epochs(sense_epochs, e);
            }
            let seeds = FitSeeds::from_global(cfg.seed);
            let mut head = build_head(sidecar.penultimate_dim, sidecar.num_classes, &fit.head_hidden, &mut rng::rng(seeds.init_h))?;
            let mut tc = fit.train_head.clone();
            tc.seed = seeds.train_h;
            let report = train_head(&mut head, &feats, &labels, &introspect::fit::head_loss_spec(fit.head_loss), &tc)?;
            let norm = meta.map(|m| m.normalization).unwrap_or_else(|| Normalization::identity(1));
            let pipeline = TwoStagePipeline::new(sensing, loss, head, norm)?;
            save_bundle(&pipeline, &out.join("model"))?;
            write(&out.join("curve_head.csv"), curve_csv(&report))?;
            if let Some(last) = report.curve.last() {
                println!("head_train_accuracy={}", last.accuracy);
            }
        }
        Command::Eval { model, bin_midpoint } => {
            let pipeline = load_bundle(&model)?;
            let (_, test) = load_datasets(&cfg)?;
            let opts = EvalOptions {
                bins: if bin_midpoint { BinConfidence::Midpoint } else { cfg.eval.bins },
                workers,
            };
            let report = evaluate(&pipeline, &test, &conditions(&cfg), &opts)?;
            write(&out.join("eval.csv"), report.to_csv())?;
            write(&out.join("eval_plot.csv"), report.to_plot_csv())?;
            for m in Mode::BOTH {
                if let Some(r) = report.row("clean", 0, m) {
                    println!("{m}: clean accuracy {:.4} ece {:.4}", r.accuracy, r.ece);
                }
            }
        }
        Command::Al {
            strategy,
            mode,
            rounds,
            query_batch,
            initial,
            repeat,
            warm_start,
        } => {
            let mut cfg = cfg;
            if !strategy.is_empty() {
                cfg.al.strategies = strategy.iter().map(|s| s.parse()).collect::<Result<Vec<Strategy>>>()?;
            }
            if !mode.is_empty() {
                cfg.al.modes = mode.iter().map(|m| parse_mode(m)).collect::<Result<_>>()?;
            }
            cfg.al.rounds = rounds.unwrap_or(cfg.al.rounds);
            cfg.al.query_batch = query_batch.unwrap_or(cfg.al.query_batch);
            cfg.al.initial_random = initial.unwrap_or(cfg.al.initial_random);
            cfg.al.repeat = repeat.unwrap_or(cfg.al.repeat);
            cfg.al.warm_start |= warm_start;
            cfg.validate()?;
            let (train, test) = load_datasets(&cfg)?;
            let report = run_al(&cfg, &train, &test, workers)?;
            write(&out.join("al.csv"), report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Ood {
            model,
            temperature,
            epsilon,
            adversarial,
        } => {
            let pipeline = load_bundle(&model)?;
            let (_, test) = load_datasets(&cfg)?;
            let mut scoring = cfg.ood.scoring.clone();
            scoring.temperature = temperature.unwrap_or(scoring.temperature);
            scoring.odin_epsilon = epsilon.unwrap_or(scoring.odin_epsilon);
            scoring.adversarial |= adversarial;
            let sets = ood_sets(&cfg, &test)?;
            let report = run_ood(&pipeline, &test, &sets, &scoring, workers)?;
            write(&out.join("ood.csv"), report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Diag { model, probes, ridge } => {
            let pipeline = load_bundle(&model)?;
            let (train, test) = load_datasets(&cfg)?;
            let prep = |d: &LabeledDataset, n: usize| -> Vec<Vec<f64>> { d.samples.iter().take(n).map(|s| pipeline.prepare(s)).collect() };
            let test_x = prep(&test, probes);
            let sparsity = sparsity_report(&pipeline.sensing, &test_x, &LossSpec::CrossEntropy)?;
            let train_feats = extract_batch(&pipeline.sensing, &prep(&train, probes.max(1)), &pipeline.loss, workers)?;
            let probe = extract_batch(&pipeline.sensing, &test_x[..test_x.len().min(1)], &pipeline.loss, 1)?;
            let fisher = match probe.first() {
                Some(p) => Some(fisher_variance(&train_feats, p, ridge)?),
                None => None,
            };
            let body = serde_json::json!({
                "sparsity": { "mean_ratio": sparsity.mean_ratio, "max_ratio": sparsity.max_ratio, "probes": sparsity.probes.len() },
                "fisher": fisher,
            });
            write(&out.join("diag.json"), to_json(&body))?;
            println!("sparsity_mean_ratio={}", sparsity.mean_ratio);
            println!("sparsity_max_ratio={}", sparsity.max_ratio);
        }
        Command::Benchmark {
            checkpoint,
            probes,
            classes,
        } => {
            let seed = rng::substream(cfg.seed, "benchmark");
            let net = match checkpoint {
                Some(p) => load_network(&p)?,
                None => {
                    let (train, _) = load_datasets(&cfg)?;
                    let mut dims = vec![train.shape.len()];
                    dims.extend_from_slice(&cfg.fit.sensing_hidden);
                    dims.push(classes);
                    Network::random(&dims, cfg.fit.sensing_activation, &mut rng::rng(rng::substream(seed, stream::INIT)))?
                }
            };
            let probes = random_probes(net.input_dim(), probes, seed);
            let loss = extraction_loss(&cfg, None).unwrap_or(LossSpec::MseM { m: 1.0 });
            let report = benchmark(&net, &probes, &loss, workers)?;
            let json = to_json(&report);
            write(&out.join("benchmark.json"), &json)?;
            println!("{json}");
        }
        Command::Pipeline {
            skip_al,
            skip_ood,
            checkpoint_every,
        } => {
            let mut cfg = cfg;
            cfg.skip_al |= skip_al;
            cfg.skip_ood |= skip_ood;
            cfg.checkpoint_every = checkpoint_every.unwrap_or(cfg.checkpoint_every);
            let outcome = run_pipeline(&cfg, &out)?;
            for m in Mode::BOTH {
                if let Some(r) = outcome.eval.row("clean", 0, m) {
                    println!("{m}: clean accuracy {:.4} ece {:.4}", r.accuracy, r.ece);
                }
            }
            println!("manifest={}", out.join(introspect::pipeline::MANIFEST_FILE).display());
        }
    }
    Ok(())
}

fn parse_mode(s: &str) -> Result<Mode> {
    Mode::BOTH
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
}

fn random_probes(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng as _;
    let mut r = rng::rng(seed);
    (0..count).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}
