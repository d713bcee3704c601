use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use differflow::detect::{self, default_sigma, rotation_angles, GradientMap, ScoreReport};
use differflow::extractor::{toy_extractor, FeaturePipeline};
use differflow::imageops::{sample_transforms, Dataset, Image};
use differflow::metrics::{format_auroc, histogram, roc_curve};
use differflow::store::{extractor_from_file, ExtractorSetup, FeatureFile, Metadata, SavedModel, TensorFile};
use differflow::training::{self, split_indices, AugmentedImages, TrainOutcome};
use differflow::{derive_seed, seeds, Error};

use crate::config::{ConfigArgs, ExtractorSource, RunConfig, Sigma};
use crate::synth::{self, Counts, Kind};
use crate::{with_suffix, CliError, Command};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Image dataset root (uses `train/good`) or a `.dff` feature file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_name = "MODEL")]
    pub out: PathBuf,
    /// Loss log; defaults to the model path plus `.loss.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub run: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Image dataset root (uses `test/*`) or a `.dff` feature file.
    #[arg(long)]
    pub data: PathBuf,
    /// Shorthand for `--test-transform-count`.
    #[arg(long, value_name = "N")]
    pub transforms: Option<usize>,
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score file written by `score`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Report directory: `auroc.txt`, `roc.csv`, `hist.csv`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
    /// Upper end of the histogram; larger scores land in the last bin.
    #[arg(long)]
    pub clip_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// PNG map; the maximum goes to `<out>.max`.
    #[arg(long, value_name = "PNG")]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training samples; defaults to 2000 vectors or 64 images.
    #[arg(long)]
    pub train: Option<usize>,
    /// Test samples per class; defaults to 500 vectors or 32 images.
    #[arg(long)]
    pub test: Option<usize>,
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Localize(a) => cmd_localize(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn is_feature_file(path: &Path) -> bool {
    path.is_file()
}

/// The extractor named by the config, with its scales.
pub fn build_pipeline(cfg: &RunConfig) -> Result<FeaturePipeline, CliError> {
    let extractor = match &cfg.extractor {
        ExtractorSource::Toy => toy_extractor(derive_seed(cfg.seed, seeds::EXTRACTOR)),
        ExtractorSource::File(path) => extractor_from_file(&TensorFile::read(path)?)?.extractor,
    };
    Ok(FeaturePipeline::new(extractor, cfg.scale_config())?)
}

/// The pipeline a model was trained with; only image-trained models have one.
pub fn model_pipeline(model: &SavedModel) -> Result<FeaturePipeline, CliError> {
    let setup = model.extractor.as_ref().ok_or_else(|| {
        CliError::Usage(
            "this model was trained on precomputed features and has no extractor; \
             image scoring and localization need a model trained from images"
                .into(),
        )
    })?;
    Ok(FeaturePipeline::new(setup.extractor.clone(), setup.scales.clone())?)
}

fn run_metadata(cfg: &RunConfig) -> Result<Metadata, CliError> {
    let mut m = Metadata::new();
    for line in cfg.to_text().lines() {
        let (k, v) = line.split_once(" = ").expect("to_text writes `key = value`");
        m.set(format!("run.{k}"), v)?;
    }
    Ok(m)
}

/// Trains on images, drawing fresh transforms each epoch when enabled.
pub fn train_images(images: Vec<Image>, cfg: &RunConfig) -> Result<(SavedModel, TrainOutcome), CliError> {
    if images.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let pipeline = build_pipeline(cfg)?;
    let (train_idx, val_idx) = split_indices(images.len(), cfg.validation_fraction, cfg.seed);
    let validation = if val_idx.is_empty() {
        None
    } else {
        let held: Vec<Image> = val_idx.iter().map(|&i| images[i].clone()).collect();
        Some(pipeline.extract_batch(&held)?)
    };
    let train_set: Vec<Image> = train_idx.iter().map(|&i| images[i].clone()).collect();
    let transforms = cfg.train_transforms.then(|| cfg.transform_config());
    let mut data = AugmentedImages::new(train_set, &pipeline, transforms, cfg.train_transform_count, cfg.seed)?;
    let outcome = training::train(&mut data, &cfg.train_config(), validation.as_ref())?;
    let model = SavedModel {
        flow: outcome.model.clone(),
        extractor: Some(ExtractorSetup {
            extractor: pipeline.extractor().clone(),
            scales: pipeline.config().clone(),
        }),
        metadata: run_metadata(cfg)?,
    };
    Ok((model, outcome))
}

/// Trains on the non-anomalous records of a feature file.
pub fn train_feature_file(file: &FeatureFile, cfg: &RunConfig) -> Result<(SavedModel, TrainOutcome), CliError> {
    let normal: Vec<_> = file.records.iter().filter(|r| r.label != 1).cloned().collect();
    if normal.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let normal = FeatureFile::new(file.dim, normal)?;
    let outcome = training::train_features(&normal.matrix(), &cfg.train_config())?;
    let model = SavedModel {
        flow: outcome.model.clone(),
        extractor: None,
        metadata: run_metadata(cfg)?,
    };
    Ok((model, outcome))
}

fn loss_log(outcome: &TrainOutcome) -> String {
    let mut out = String::from("# epoch,mean_nll,validation_nll\n");
    for s in &outcome.history {
        let val = s.validation_nll.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", s.epoch, s.mean_nll, val).expect("writing to a String");
    }
    out
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&a.run)?;
    let (model, outcome) = if is_feature_file(&a.data) {
        train_feature_file(&FeatureFile::read(&a.data)?, &cfg)?
    } else {
        let dataset = Dataset::scan(&a.data)?;
        let images = dataset
            .train
            .iter()
            .map(Image::load_png)
            .collect::<Result<Vec<_>, _>>()?;
        if images.is_empty() {
            return Err(CliError::Usage(format!(
                "no training images under {}/train/good",
                a.data.display()
            )));
        }
        train_images(images, &cfg)?
    };
    model.save(&a.out)?;
    let log = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    write(&log, &loss_log(&outcome))?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        eprintln!(
            "epoch 1 nll {:.4}, epoch {} nll {:.4}",
            first.mean_nll, last.epoch, last.mean_nll
        );
    }
    Ok(())
}

/// One labelled test image.
#[derive(Debug, Clone)]
pub struct LabelledImage {
    pub id: String,
    pub label: i8,
    pub image: Image,
}

/// Scores images with `test_transform_count` seeded transforms each.
pub fn score_images(
    model: &SavedModel,
    samples: &[LabelledImage],
    cfg: &RunConfig,
) -> Result<Vec<ScoreReport>, CliError> {
    let pipeline = model_pipeline(model)?;
    let transforms = sample_transforms(
        derive_seed(cfg.seed, seeds::TEST_TRANSFORMS),
        cfg.test_transform_count,
        &cfg.transform_config(),
    )?;
    samples
        .iter()
        .map(|s| {
            let mut r = detect::anomaly_score(&s.image, &pipeline, &model.flow, &transforms, cfg.score)?;
            r.sample_id = s.id.clone();
            r.label = s.label;
            Ok(r)
        })
        .collect()
}

fn cmd_score(a: &ScoreArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(&a.run)?;
    if let Some(n) = a.transforms {
        cfg.test_transform_count = n;
    }
    let model = SavedModel::load(&a.model)
        .map_err(|e| CliError::Usage(format!("cannot load model {}: {e}", a.model.display())))?;
    let reports = if is_feature_file(&a.data) {
        let file = FeatureFile::read(&a.data)?;
        detect::score_feature_file(&model.flow, &file, cfg.test_transform_count, cfg.score)?
    } else {
        let dataset = Dataset::scan(&a.data)?;
        if dataset.test.is_empty() {
            return Err(CliError::Usage(format!(
                "no test images under {}/test",
                a.data.display()
            )));
        }
        let samples = dataset
            .test
            .iter()
            .map(|t| {
                Ok(LabelledImage {
                    id: t.id(),
                    label: t.label,
                    image: Image::load_png(&t.path)?,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        score_images(&model, &samples, &cfg)?
    };
    write(&a.out, &detect::format_scores(&reports))
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let text =
        std::fs::read_to_string(&a.scores).map_err(|e| CliError::Usage(format!("{}: {e}", a.scores.display())))?;
    let lines = detect::parse_scores(&text)?;
    let mut scores = Vec::with_capacity(lines.len());
    let mut labels = Vec::with_capacity(lines.len());
    for l in &lines {
        let anomalous = match l.label {
            0 => false,
            1 => true,
            _ => return Err(CliError::Usage(format!("sample `{}` has no label", l.sample_id))),
        };
        scores.push(l.score);
        labels.push(anomalous);
    }
    let curve = roc_curve(&scores, &labels)?;
    let clip = a
        .clip_max
        .unwrap_or_else(|| scores.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let hist = histogram(&scores, a.bins, clip)?;
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    write(&a.out.join("auroc.txt"), &format_auroc(curve.auroc))?;
    write(&a.out.join("roc.csv"), &curve.to_csv())?;
    write(&a.out.join("hist.csv"), &hist.to_csv())?;
    print!("{}", format_auroc(curve.auroc));
    Ok(())
}

/// Gradient map averaged over `rotations` evenly spaced angles.
pub fn gradient_map(model: &SavedModel, image: &Image, cfg: &RunConfig) -> Result<GradientMap, CliError> {
    let pipeline = model_pipeline(model)?;
    let sigma = match cfg.blur_sigma {
        Sigma::Auto => default_sigma(image.width()),
        Sigma::Fixed(s) => s,
    };
    Ok(detect::localize(
        image,
        &pipeline,
        &model.flow,
        &rotation_angles(cfg.rotations),
        sigma,
    )?)
}

fn cmd_localize(a: &LocalizeArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&a.run)?;
    let model = SavedModel::load(&a.model)
        .map_err(|e| CliError::Usage(format!("cannot load model {}: {e}", a.model.display())))?;
    let image = Image::load_png(&a.image)?;
    let map = gradient_map(&model, &image, &cfg)?;
    map.save(&a.out)?;
    let (y, x) = map.argmax();
    println!("max={} argmax={y},{x}", map.max());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let (train, test) = match a.kind {
        Kind::Texture => (64, 32),
        _ => (2000, 500),
    };
    let counts = Counts {
        train: a.train.unwrap_or(train),
        test: a.test.unwrap_or(test),
    };
    match a.kind {
        Kind::Gaussian => synth::write_features(&synth::gaussian(a.seed, counts, Default::default()), &a.out),
        Kind::Mixture => synth::write_features(&synth::mixture(a.seed, counts, Default::default()), &a.out),
        Kind::Texture => synth::write_textures(&synth::textures(a.seed, counts, Default::default()), &a.out),
    }
}
