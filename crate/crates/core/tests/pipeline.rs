use introspect::config::{DataSource, RunConfig};
use introspect::data::CorruptionKind;
use introspect::fit::FitSpec;
use introspect::head::{load_bundle, Mode};
use introspect::ood::{OodMethod, OOD_CSV_HEADER};
use introspect::pipeline::{hold_out_class, load_datasets, run_pipeline, Manifest, MANIFEST_FILE};

fn small() -> RunConfig {
    let mut fit = FitSpec {
        sensing_hidden: vec![12, 6],
        head_hidden: vec![12],
        ..FitSpec::default()
    }
    .with_epochs(6, 6);
    fit.train_sense.batch_size = 16;
    fit.train_head.batch_size = 16;
    let mut cfg = RunConfig {
        seed: 5,
        workers: 1,
        data: DataSource::Blobs {
            num_classes: 3,
            dim: 4,
            train_per_class: 30,
            test_per_class: 10,
            spread: 0.5,
        },
        fit,
        ..RunConfig::default()
    };
    cfg.eval.corruptions = vec![CorruptionKind::GaussianNoise, CorruptionKind::Contrast];
    cfg.eval.severities = vec![2, 5];
    cfg.al.rounds = 1;
    cfg.al.query_batch = 4;
    cfg.al.initial_random = 8;
    cfg.al.min_steps = 0;
    cfg.ood.set_size = 25;
    cfg
}

#[test]
fn outputs_are_listed_and_hashed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.checkpoint_every = 3;
    let out = run_pipeline(&cfg, dir.path()).unwrap();
    let on_disk: Manifest = serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, out.manifest);
    for f in on_disk.files() {
        let body = std::fs::read(dir.path().join(&f.path)).unwrap();
        assert_eq!(introspect::hashing::sha256_hex(&body), f.sha256, "{}", f.path);
    }
    let paths: Vec<&str> = on_disk.files().map(|f| f.path.as_str()).collect();
    for want in ["checkpoints/sensing_epoch_0003.json", "checkpoints/sensing_epoch_0006.json", "eval.csv", "al.csv", "ood.csv", "config.resolved.json"] {
        assert!(paths.contains(&want), "{want} missing from {paths:?}");
    }

    // The resolved config reloads to the same run description.
    let resolved = std::fs::read_to_string(dir.path().join("config.resolved.json")).unwrap();
    assert_eq!(RunConfig::parse(&resolved, "config.resolved.json").unwrap(), cfg);

    // The saved bundle reproduces the in-memory pipeline.
    let bundle = load_bundle(&dir.path().join("model")).unwrap();
    assert_eq!(bundle, out.fitted.pipeline);

    // 1 clean + 2 kinds x 2 severities, per mode
    assert_eq!(out.eval.rows.len(), 2 * 5);
    let ood = out.ood.unwrap();
    assert!(ood.to_csv().starts_with(OOD_CSV_HEADER));
    assert!(ood.row(OodMethod::Odin, Mode::Introspective, "uniform-noise").is_some());
    assert_eq!(out.al.unwrap().rows.len(), 2 * 2);
}

#[test]
fn skip_flags_drop_their_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.skip_al = true;
    cfg.skip_ood = true;
    let out = run_pipeline(&cfg, dir.path()).unwrap();
    assert!(out.al.is_none() && out.ood.is_none());
    assert!(!out.manifest.sections.contains_key("al"));
    assert!(!dir.path().join("ood.csv").exists());
}

#[test]
fn held_out_class_becomes_an_ood_set() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.skip_al = true;
    cfg.ood.held_out_class = Some(1);
    let out = run_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(out.fitted.pipeline.sensing.num_classes(), 2);
    let ood = out.ood.unwrap();
    assert!(ood.rows.iter().any(|r| r.ood_set == "held-out-class"));

    let (train, test) = load_datasets(&cfg).unwrap();
    let (tr, te, held) = hold_out_class(&train, &test, 2).unwrap();
    assert_eq!(held.len(), 10);
    assert!(tr.labels.iter().chain(&te.labels).all(|&y| y < 2));
    assert!(hold_out_class(&train, &test, 3).is_err());
}

#[test]
fn spatial_corruptions_need_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.skip_al = true;
    cfg.skip_ood = true;
    cfg.eval.corruptions = vec![CorruptionKind::BoxBlur];
    let err = run_pipeline(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("eval"), "{err}");
}

#[test]
fn different_seeds_give_different_manifests() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small();
    cfg.skip_al = true;
    cfg.skip_ood = true;
    let ma = run_pipeline(&cfg, a.path()).unwrap().manifest;
    cfg.seed += 1;
    let mb = run_pipeline(&cfg, b.path()).unwrap().manifest;
    let model = |m: &Manifest| m.files().find(|f| f.path == "model/sensing.json").unwrap().sha256.clone();
    assert_ne!(model(&ma), model(&mb));
}
