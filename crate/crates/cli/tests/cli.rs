//! The binary end to end: exit codes, file formats and flag handling.

use std::path::Path;
use std::process::{Command, Output};

use differflow::imageops::Image;
use differflow::store::{FeatureFile, FeatureRecord};

fn differflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_differflow"))
        .args(args)
        .env("DIFFERFLOW_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = differflow(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small mixture feature set under `dir`, returns (train.dff, test.dff).
fn mixture(dir: &Path) -> (String, String) {
    ok(&[
        "synth",
        "--kind",
        "mixture",
        "--out",
        p(dir),
        "--seed",
        "3",
        "--train",
        "300",
        "--test",
        "40",
    ]);
    (
        p(&dir.join("train.dff")).to_owned(),
        p(&dir.join("test.dff")).to_owned(),
    )
}

const SMALL_FLOW: [&str; 6] = ["--blocks", "2", "--hidden-width", "16", "--validation-fraction", "0"];

fn train_small(train: &str, model: &Path, epochs: &str) {
    let mut args = vec![
        "train",
        "--data",
        train,
        "--out",
        p(model),
        "--epochs",
        epochs,
        "--batch-size",
        "32",
    ];
    args.extend(SMALL_FLOW);
    ok(&args);
}

#[test]
fn help_lists_run_settings() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--config",
        "--learning-rate",
        "--blocks",
        "--clamp-alpha",
        "--test-transform-count",
        "--score",
    ] {
        assert!(text.contains(flag), "missing {flag} in\n{text}");
    }
}

#[test]
fn empty_data_directory_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.dfn");
    let out = differflow(&["train", "--data", p(dir.path()), "--out", p(&model)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error: "));
    assert!(!model.exists());
}

#[test]
fn missing_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = mixture(dir.path());
    let out = differflow(&[
        "score",
        "--model",
        p(&dir.path().join("nope.dfn")),
        "--data",
        &test,
        "--out",
        "/dev/null",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cannot load model"));
}

#[test]
fn eval_needs_both_classes() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("s.csv");
    std::fs::write(&scores, "a,1.5,0\nb,0.5,0\n").unwrap();
    let out = differflow(&["eval", "--scores", p(&scores), "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn eval_of_separated_scores_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("s.csv");
    std::fs::write(&scores, "a,0.1,0\nb,0.2,0\nc,0.9,1\nd,3.5,1\n").unwrap();
    let report = dir.path().join("r");
    let out = ok(&["eval", "--scores", p(&scores), "--out", p(&report), "--bins", "4"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "auroc=1");
    assert_eq!(
        std::fs::read_to_string(report.join("auroc.txt")).unwrap().trim(),
        "auroc=1"
    );
    let roc = std::fs::read_to_string(report.join("roc.csv")).unwrap();
    assert!(roc.lines().any(|l| l.starts_with('#')));
    let hist = std::fs::read_to_string(report.join("hist.csv")).unwrap();
    assert_eq!(hist.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn feature_training_lowers_the_loss_and_scores_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = mixture(dir.path());
    let model = dir.path().join("m.dfn");
    train_small(&train, &model, "8");

    let log = std::fs::read_to_string(dir.path().join("m.dfn.loss.csv")).unwrap();
    let nll: Vec<f64> = log
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(nll.len(), 8);
    assert!(nll[7] < nll[0], "{nll:?}");

    let score = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "score",
            "--model",
            p(&model),
            "--data",
            &test,
            "--transforms",
            "1",
            "--out",
            p(&out),
        ]);
        std::fs::read_to_string(out).unwrap()
    };
    let first = score("a.csv");
    assert_eq!(first, score("b.csv"));
    assert_eq!(first.lines().count(), 80);
    for line in first.lines() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3, "{line}");
        assert!(fields[1].parse::<f64>().unwrap().is_finite());
        assert!(fields[2] == "0" || fields[2] == "1");
    }
}

#[test]
fn localizing_with_a_feature_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = mixture(dir.path());
    let model = dir.path().join("m.dfn");
    train_small(&train, &model, "1");
    let img = dir.path().join("x.png");
    Image::from_fn(8, 8, |_, _, _| 0.5).save_png(&img).unwrap();
    let out = differflow(&[
        "localize",
        "--model",
        p(&model),
        "--image",
        p(&img),
        "--out",
        p(&dir.path().join("map.png")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let records = (0..64)
        .map(|i| FeatureRecord {
            sample_id: format!("train/{i:04}"),
            label: 0,
            transform_id: 0,
            features: vec![1e30 * (i as f32 + 1.0); 4],
        })
        .collect();
    let data = dir.path().join("huge.dff");
    FeatureFile::new(4, records).unwrap().write(&data).unwrap();
    let model = dir.path().join("m.dfn");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&model), "--epochs", "2"];
    args.extend(SMALL_FLOW);
    let out = differflow(&args);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(!model.exists());
}

#[test]
fn config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = mixture(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# small\nblocks = 2\nhidden_width = 8\nepochs = 2\nvalidation_fraction = 0\n",
    )
    .unwrap();
    let model = dir.path().join("m.dfn");
    ok(&[
        "train",
        "--data",
        &train,
        "--out",
        p(&model),
        "--config",
        p(&cfg),
        "--epochs",
        "3",
    ]);
    let log = std::fs::read_to_string(dir.path().join("m.dfn.loss.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3);

    std::fs::write(&cfg, "blocks = 2\nlearning_rat = 1e-3\n").unwrap();
    let out = differflow(&["train", "--data", &train, "--out", p(&model), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("config line 2"), "{}", stderr(&out));
}

#[test]
fn texture_synth_writes_images_and_boxes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "synth",
        "--kind",
        "texture",
        "--out",
        p(dir.path()),
        "--seed",
        "9",
        "--train",
        "3",
        "--test",
        "2",
    ]);
    let count = |sub: &str| std::fs::read_dir(dir.path().join(sub)).unwrap().count();
    assert_eq!(count("train/good"), 3);
    assert_eq!(count("test/good"), 2);
    assert_eq!(count("test/blemish"), 2);
    let img = Image::load_png(dir.path().join("test/blemish/000.png")).unwrap();
    assert_eq!((img.height(), img.width()), (64, 64));
    let boxes = std::fs::read_to_string(dir.path().join("boxes.csv")).unwrap();
    let rows: Vec<&str> = boxes.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("blemish/000.png,"));
}
