use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use introspect::config::RunConfig;
use introspect::fit::{new_sensing, FitSeeds};
use introspect::nn::load_network;

const CONFIG: &str = r#"
seed = 3
workers = 1

[data]
source = "blobs"
num_classes = 3
dim = 5
train_per_class = 30
test_per_class = 10
spread = 0.5

[fit]
sensing_hidden = [8, 4]
head_hidden = [8]

[fit.train_sense]
epochs = 8
batch_size = 8
lr_schedule = [[1, 0.05]]

[fit.train_head]
epochs = 8
batch_size = 8
lr_schedule = [[1, 0.05]]

[eval]
corruptions = ["gaussian-noise", "salt-pepper"]
severities = [1, 3]

[al]
rounds = 1
query_batch = 5
initial_random = 10
min_steps = 300

[ood]
set_size = 20
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs the binary with the test config and `--out <dir>/<out>`.
    fn run(&self, out: &str, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_introspect"));
        cmd.args(args)
            .arg("--config")
            .arg(self.path("run.toml"))
            .arg("--out")
            .arg(self.path(out));
        cmd.output().unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) -> String {
        let o = self.run(out, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn config(&self) -> RunConfig {
        RunConfig::load(&self.path("run.toml")).unwrap()
    }
}

fn value(stdout: &str, key: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
        .to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn zero_epochs_writes_the_initialisation() {
    let env = Env::new();
    env.ok("s", &["train-sense", "--epochs", "0"]);
    let cfg = env.config();
    let want = new_sensing(5, 3, &cfg.fit, FitSeeds::from_global(cfg.seed).init_f).unwrap();
    assert_eq!(load_network(&env.path("s/sensing.json")).unwrap(), want);
}

#[test]
fn train_sense_is_reproducible() {
    let env = Env::new();
    let a = env.ok("a", &["train-sense"]);
    let b = env.ok("b", &["train-sense"]);
    assert_eq!(value(&a, "checkpoint_sha256"), value(&b, "checkpoint_sha256"));
    assert_eq!(std::fs::read(env.path("a/sensing.json")).unwrap(), std::fs::read(env.path("b/sensing.json")).unwrap());
    let acc: f64 = value(&a, "test_accuracy").parse().unwrap();
    assert!(acc > 0.8, "blobs test accuracy {acc}");
    let c = env.ok("c", &["train-sense", "--seed", "4"]);
    assert_ne!(value(&a, "checkpoint_sha256"), value(&c, "checkpoint_sha256"));
}

#[test]
fn staged_commands_chain() {
    let env = Env::new();
    env.ok("s", &["train-sense"]);
    let ckpt = env.path("s/sensing.json");
    let ckpt = ckpt.to_str().unwrap();
    let meta = json(&env.path("s/sensing_meta.json"));
    let m = meta["mean_max_logit"].as_f64().unwrap();

    let out = env.ok("f", &["extract", "--checkpoint", ckpt, "--oracle"]);
    let dev: f64 = value(&out, "max_deviation").parse().unwrap();
    assert!(dev <= 1e-10, "{dev}");
    let sidecar = json(&env.path("f/features.json"));
    assert_eq!(sidecar["loss"], "mse-m");
    assert_eq!(sidecar["m"].as_f64().unwrap(), m);
    assert_eq!(sidecar["penultimate_dim"], 4);
    assert_eq!(sidecar["num_classes"], 3);

    let feats = env.path("f/features.csv");
    env.ok("h", &["train-head", "--features", feats.to_str().unwrap(), "--checkpoint", ckpt]);
    let model = env.path("h/model");
    let model = model.to_str().unwrap();
    assert!(env.path("h/curve_head.csv").exists());

    let out = env.ok("e", &["eval", "--model", model]);
    assert!(out.contains("introspective: clean accuracy"), "{out}");
    let csv = std::fs::read_to_string(env.path("e/eval.csv")).unwrap();
    // clean plus 2 kinds x 2 severities, both modes
    assert_eq!(csv.lines().count(), 1 + 2 * 5);

    let out = env.ok("o", &["ood", "--model", model, "--temperature", "10", "--epsilon", "0.001"]);
    assert!(out.starts_with("method,mode,ood_set,fpr95,det_err,auroc"));
    assert_eq!(out.lines().count(), 1 + 2 * 2 * 2);

    env.ok("d", &["diag", "--model", model, "--probes", "20"]);
    let diag = json(&env.path("d/diag.json"));
    assert!(diag["sparsity"]["mean_ratio"].as_f64().unwrap() <= 1.0);
}

#[test]
fn train_head_rejects_features_from_another_checkpoint() {
    let env = Env::new();
    env.ok("s", &["train-sense"]);
    env.ok("t", &["train-sense", "--seed", "9"]);
    env.ok("f", &["extract", "--checkpoint", env.path("s/sensing.json").to_str().unwrap()]);
    let o = env.run(
        "h",
        &[
            "train-head",
            "--features",
            env.path("f/features.csv").to_str().unwrap(),
            "--checkpoint",
            env.path("t/sensing.json").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ce_extraction_needs_no_sidecar() {
    let env = Env::new();
    env.ok("s", &["train-sense"]);
    std::fs::remove_file(env.path("s/sensing_meta.json")).unwrap();
    let ckpt = env.path("s/sensing.json");
    env.ok("f", &["extract", "--checkpoint", ckpt.to_str().unwrap(), "--loss", "ce"]);
    let sidecar = json(&env.path("f/features.json"));
    assert_eq!(sidecar["loss"], "ce");
    assert!(sidecar["m"].is_null());
    // MSE-M without a measured M is a configuration error.
    let o = env.run("g", &["extract", "--checkpoint", ckpt.to_str().unwrap(), "--loss", "mse-m"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn extract_rejects_mismatched_and_accepts_empty_datasets() {
    let env = Env::new();
    env.ok("s", &["train-sense"]);
    let ckpt = env.path("s/sensing.json");
    std::fs::write(env.path("wide.csv"), "0,1,2,3\n1,4,5,6\n").unwrap();
    let o = env.run("x", &["extract", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", env.path("wide.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(env.path("empty.csv"), "").unwrap();
    let out = env.ok("y", &["extract", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", env.path("empty.csv").to_str().unwrap()]);
    assert_eq!(value(&out, "rows"), "0");
}

#[test]
fn benchmark_reports_its_schema() {
    let env = Env::new();
    let out = env.ok("b", &["benchmark", "--probes", "30", "--classes", "4"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v, json(&env.path("b/benchmark.json")));
    assert_eq!(v["n_probes"], 30);
    assert_eq!(v["num_classes"], 4);
    for key in ["exact", "fast", "speedup", "parallel_speedup", "max_deviation"] {
        assert!(!v[key].is_null(), "{key}");
    }
    assert!(v["max_deviation"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn pipeline_honours_skip_flags() {
    let env = Env::new();
    env.ok("p", &["pipeline", "--skip-al", "--skip-ood", "--checkpoint-every", "4"]);
    let manifest = json(&env.path("p/manifest.json"));
    let sections = manifest["sections"].as_object().unwrap();
    assert!(!sections.contains_key("al") && !sections.contains_key("ood"));
    assert!(!env.path("p/al.csv").exists());
    assert!(env.path("p/checkpoints/sensing_epoch_0004.json").exists());
    assert!(env.path("p/checkpoints/sensing_epoch_0008.json").exists());

    env.ok("q", &["pipeline"]);
    let manifest = json(&env.path("q/manifest.json"));
    let sections = manifest["sections"].as_object().unwrap();
    assert!(sections.contains_key("al") && sections.contains_key("ood"));
}

#[test]
fn al_command_writes_rows_per_round() {
    let env = Env::new();
    let out = env.ok("a", &["al", "--strategy", "entropy", "--strategy", "badge", "--mode", "feed-forward", "--rounds", "2"]);
    assert_eq!(out.lines().count(), 1 + 2 * 3);
    assert_eq!(out, std::fs::read_to_string(env.path("a/al.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let env = Env::new();
    let code = |o: Output| o.status.code();
    assert_eq!(code(env.run("x", &["no-such-command"])), Some(1));
    assert_eq!(code(env.run("x", &["al", "--strategy", "psychic"])), Some(1));
    assert_eq!(code(env.run("x", &["al", "--rounds", "1000"])), Some(1));
    assert_eq!(code(env.run("x", &["eval", "--model", env.path("missing").to_str().unwrap()])), Some(2));

    std::fs::write(env.path("bad.toml"), "seed = 1\nnope = true\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_introspect"))
        .args(["pipeline", "--config"])
        .arg(env.path("bad.toml"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}
