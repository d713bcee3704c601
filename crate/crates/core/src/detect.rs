//! Anomaly scores, the threshold decision and gradient maps.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::extractor::{FeaturePipeline, InputGradient};
use crate::flow::{FlowGraph, FlowModel};
use crate::imageops::{rotate, rotate_interleaved, to_byte, write_png, Image, TransformSpec};
use crate::store::FeatureFile;

/// Score of one sample: the mean over its transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub sample_id: String,
    pub score: f64,
    /// -1 unknown, 0 normal, 1 anomalous.
    pub label: i8,
    pub per_transform: Vec<f64>,
}

impl ScoreReport {
    fn from_values(per_transform: Vec<f64>) -> Result<Self> {
        if per_transform.is_empty() {
            return Err(Error::InvalidArgument("at least one transform is required".into()));
        }
        let score = per_transform.iter().sum::<f64>() / per_transform.len() as f64;
        Ok(Self {
            sample_id: String::new(),
            score,
            label: -1,
            per_transform,
        })
    }
}

/// What is averaged over the transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// `-log p_Z(z) = |z|^2 / 2`, dropping the constant: the density of the
    /// latent code alone.
    #[default]
    Latent,
    /// The training loss `|z|^2 / 2 - log|det J|`, i.e. the feature density.
    Nll,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Latent => "latent",
            ScoreMode::Nll => "nll",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(ScoreMode::Latent),
            "nll" => Ok(ScoreMode::Nll),
            _ => Err(Error::InvalidArgument(format!("unknown score mode `{s}` (latent|nll)"))),
        }
    }
}

/// Per-row scores of `features: [T, D]`, averaged.
pub fn score_features(model: &FlowModel, features: &Tensor<f32>, mode: ScoreMode) -> Result<ScoreReport> {
    let graph = FlowGraph::new(model)?;
    score_features_with(&graph, model, features, mode)
}

fn score_features_with(
    graph: &FlowGraph,
    model: &FlowModel,
    features: &Tensor<f32>,
    mode: ScoreMode,
) -> Result<ScoreReport> {
    let per_row: Vec<f64> = match mode {
        ScoreMode::Nll => graph.nll(model, features)?.into_iter().map(f64::from).collect(),
        ScoreMode::Latent => {
            let (z, _) = graph.forward(model, features)?;
            z.data()
                .chunks_exact(model.dim())
                .map(|row| row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / 2.0)
                .collect()
        }
    };
    ScoreReport::from_values(per_row)
}

/// Mean score of `img` over the transforms.
pub fn anomaly_score(
    img: &Image,
    pipeline: &FeaturePipeline,
    model: &FlowModel,
    transforms: &[TransformSpec],
    mode: ScoreMode,
) -> Result<ScoreReport> {
    if transforms.is_empty() {
        return Err(Error::InvalidArgument("at least one transform is required".into()));
    }
    let views = transforms.iter().map(|t| t.apply(img)).collect::<Result<Vec<_>>>()?;
    score_features(model, &pipeline.extract_batch(&views)?, mode)
}

/// Scores every sample of a feature file using its first `transforms`
/// records (ordered by transform id). Samples keep their order of first
/// appearance.
pub fn score_feature_file(
    model: &FlowModel,
    file: &FeatureFile,
    transforms: usize,
    mode: ScoreMode,
) -> Result<Vec<ScoreReport>> {
    if transforms == 0 {
        return Err(Error::InvalidArgument("at least one transform is required".into()));
    }
    if file.dim != model.dim() {
        return Err(Error::Shape(format!(
            "feature file has dimension {}, model expects {}",
            file.dim,
            model.dim()
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in file.records.iter().enumerate() {
        groups
            .entry(r.sample_id.as_str())
            .or_insert_with(|| {
                order.push(&r.sample_id);
                Vec::new()
            })
            .push(i);
    }
    let graph = FlowGraph::new(model)?;
    order
        .into_iter()
        .map(|id| {
            let mut rows = groups.remove(id).expect("grouped above");
            if rows.len() < transforms {
                return Err(Error::InvalidArgument(format!(
                    "sample `{id}` has {} transforms, {transforms} requested",
                    rows.len()
                )));
            }
            rows.sort_by_key(|&i| file.records[i].transform_id);
            rows.truncate(transforms);
            let labels: Vec<i8> = rows.iter().map(|&i| file.records[i].label).collect();
            if labels.iter().any(|&l| l != labels[0]) {
                return Err(Error::Corrupt(format!("sample `{id}` has conflicting labels")));
            }
            let data = rows
                .iter()
                .flat_map(|&i| file.records[i].features.iter().copied())
                .collect();
            let features = Tensor::new([rows.len(), file.dim], data)?;
            let mut report = score_features_with(&graph, model, &features, mode)?;
            report.sample_id = id.to_owned();
            report.label = labels[0];
            Ok(report)
        })
        .collect()
}

/// Anomalous when the score reaches the threshold.
pub fn classify(tau: f64, theta: f64) -> Result<bool> {
    if !tau.is_finite() || !theta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "cannot classify score {tau} at threshold {theta}"
        )));
    }
    Ok(tau >= theta)
}

/// `sample_id,score,label` lines.
pub fn format_scores(reports: &[ScoreReport]) -> String {
    let mut out = String::new();
    for r in reports {
        writeln!(out, "{},{},{}", r.sample_id, r.score, r.label).expect("writing to a String");
    }
    out
}

/// One parsed line of a score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub sample_id: String,
    pub score: f64,
    pub label: i8,
}

/// Reads the output of [`format_scores`]. Sample ids may contain commas;
/// the last two fields are always score and label.
pub fn parse_scores(text: &str) -> Result<Vec<ScoreLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::Corrupt(format!("score line {}: `{line}`", n + 1));
            let mut fields = line.rsplitn(3, ',');
            let label = fields.next().ok_or_else(bad)?.trim().parse::<i8>().map_err(|_| bad())?;
            let score = fields
                .next()
                .ok_or_else(bad)?
                .trim()
                .parse::<f64>()
                .map_err(|_| bad())?;
            let sample_id = fields.next().ok_or_else(bad)?.to_owned();
            if !(-1..=1).contains(&label) {
                return Err(bad());
            }
            Ok(ScoreLine {
                sample_id,
                score,
                label,
            })
        })
        .collect()
}

/// Non-negative saliency map with the shape of the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GradientMap {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// Position of the largest value (first one on ties), as `(y, x)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// 8-bit values scaled so the maximum maps to 255.
    pub fn to_gray8(&self) -> Vec<u8> {
        let max = self.max();
        self.data
            .iter()
            .map(|&v| if max > 0.0 { to_byte(f64::from(v / max)) } else { 0 })
            .collect()
    }

    /// Grayscale PNG at `path` plus the `max=<value>` sidecar; returns the sidecar path.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        write_png(path, self.width, self.height, image::ColorType::L8, &self.to_gray8())?;
        let sidecar = sidecar_path(path);
        std::fs::write(&sidecar, format!("max={}\n", self.max()))?;
        Ok(sidecar)
    }
}

/// `map.png` -> `map.png.max`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".max");
    PathBuf::from(s)
}

/// Normalised Gaussian taps of radius `ceil(2 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let r = (2.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable convolution of an `[H, W]` plane; outside the plane counts as zero.
pub fn blur(plane: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let pass = |src: &[f64], along_x: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let off = k as isize - r;
                    let (yy, xx) = if along_x {
                        (y as isize, x as isize + off)
                    } else {
                        (y as isize + off, x as isize)
                    };
                    if (0..height as isize).contains(&yy) && (0..width as isize).contains(&xx) {
                        acc += w * src[yy as usize * width + xx as usize];
                    }
                }
                out[y * width + x] = acc;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// `sum_c |G * grad_c|` for a `[3, H, W]` gradient.
pub fn saliency(grad: &Tensor<f64>, kernel: &[f64]) -> Result<Vec<f64>> {
    let &[c, h, w] = grad.shape() else {
        return Err(Error::Shape(format!(
            "expected [C, H, W] gradient, got {:?}",
            grad.shape()
        )));
    };
    let mut out = vec![0.0; h * w];
    for plane in grad.data().chunks_exact(h * w).take(c) {
        for (o, v) in out.iter_mut().zip(blur(plane, h, w, kernel)) {
            *o += v.abs();
        }
    }
    Ok(out)
}

/// `n` evenly spaced angles `k * 2pi / n`.
pub fn rotation_angles(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * TAU / n as f64).collect()
}

/// Default blur width for an image of the given width.
pub fn default_sigma(width: usize) -> f64 {
    width as f64 / 64.0
}

/// Gradient map averaged over rotated copies of `img`.
///
/// Each rotated copy is scored on its own; its saliency is turned back by
/// the negative angle before averaging.
pub fn localize(
    img: &Image,
    pipeline: &FeaturePipeline,
    model: &FlowModel,
    angles: &[f64],
    sigma: f64,
) -> Result<GradientMap> {
    if angles.is_empty() {
        return Err(Error::InvalidArgument("at least one rotation is required".into()));
    }
    let kernel = gaussian_kernel(sigma)?;
    let grad = InputGradient::new(pipeline, model)?;
    let (h, w) = (img.height(), img.width());
    let maps = angles
        .par_iter()
        .map(|&angle| {
            let (_, g) = grad.compute::<f32>(&rotate(img, angle))?;
            let map = saliency(&g.cast::<f64>(), &kernel)?;
            let map: Vec<f32> = map.into_iter().map(|v| v as f32).collect();
            Ok(rotate_interleaved(&map, h, w, 1, -angle))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = vec![0.0f32; h * w];
    for m in &maps {
        for (d, v) in data.iter_mut().zip(m) {
            *d += v;
        }
    }
    let n = maps.len() as f32;
    for d in &mut data {
        *d = (*d / n).max(0.0);
    }
    Ok(GradientMap {
        height: h,
        width: w,
        data,
    })
}
