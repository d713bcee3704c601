//! Seeded synthetic datasets for self-contained testing.
//!
//! * `gaussian`: normals from `N(0, I)`, anomalies from `N(shift * 1, I)`.
//! * `mixture`: normals from `1/2 N(+sep e1, I) + 1/2 N(-sep e1, I)`,
//!   anomalies from `N(0, anomaly_std^2 I)`, i.e. between the modes.
//! * `texture`: smooth value-noise images; anomalous test images carry one
//!   bright square blemish whose box is recorded.
//!
//! Feature kinds are written as `train.dff` and `test.dff`; textures use the
//! `train/good`, `test/good`, `test/blemish` layout plus `boxes.csv`.

use std::fmt::Write as _;
use std::path::Path;

use differflow::imageops::{Image, CHANNELS};
use differflow::store::{FeatureFile, FeatureRecord};
use differflow::{derive_seed, seeds};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Kind {
    Gaussian,
    Mixture,
    Texture,
}

/// Sizes shared by every kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub train: usize,
    /// Test samples per class.
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub dim: usize,
    pub shift: f64,
}

impl Default for GaussianParams {
    fn default() -> Self {
        Self { dim: 16, shift: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureParams {
    pub dim: usize,
    pub separation: f64,
    pub anomaly_std: f64,
}

impl Default for MixtureParams {
    fn default() -> Self {
        Self {
            dim: 8,
            separation: 3.0,
            anomaly_std: 1.0,
        }
    }
}

/// Train and test splits of feature vectors; test labels are 0 or 1.
#[derive(Debug, Clone)]
pub struct FeatureSplits {
    pub train: FeatureFile,
    pub test: FeatureFile,
}

impl FeatureSplits {
    pub fn test_labels(&self) -> Vec<bool> {
        self.test.records.iter().map(|r| r.label == 1).collect()
    }
}

fn normal_vec(rng: &mut differflow::Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn records(prefix: &str, label: i8, rows: Vec<Vec<f64>>) -> Vec<FeatureRecord> {
    rows.into_iter()
        .enumerate()
        .map(|(i, v)| FeatureRecord {
            sample_id: format!("{prefix}/{i:04}"),
            label,
            transform_id: 0,
            features: v.into_iter().map(|x| x as f32).collect(),
        })
        .collect()
}

fn splits(dim: usize, train: Vec<Vec<f64>>, normal: Vec<Vec<f64>>, anomalous: Vec<Vec<f64>>) -> FeatureSplits {
    let mut test = records("good", 0, normal);
    test.extend(records("anomaly", 1, anomalous));
    FeatureSplits {
        train: FeatureFile::new(dim, records("train", 0, train)).expect("generated records are consistent"),
        test: FeatureFile::new(dim, test).expect("generated records are consistent"),
    }
}

pub fn gaussian(seed: u64, counts: Counts, p: GaussianParams) -> FeatureSplits {
    let mut rng = differflow::rng(derive_seed(seed, seeds::SYNTH));
    let train = (0..counts.train).map(|_| normal_vec(&mut rng, p.dim)).collect();
    let normal = (0..counts.test).map(|_| normal_vec(&mut rng, p.dim)).collect();
    let anomalous = (0..counts.test)
        .map(|_| normal_vec(&mut rng, p.dim).into_iter().map(|v| v + p.shift).collect())
        .collect();
    splits(p.dim, train, normal, anomalous)
}

pub fn mixture(seed: u64, counts: Counts, p: MixtureParams) -> FeatureSplits {
    let mut rng = differflow::rng(derive_seed(seed, seeds::SYNTH));
    let draw = |rng: &mut differflow::Rng| {
        let mut v = normal_vec(rng, p.dim);
        v[0] += if rng.random_bool(0.5) {
            p.separation
        } else {
            -p.separation
        };
        v
    };
    let train = (0..counts.train).map(|_| draw(&mut rng)).collect();
    let normal = (0..counts.test).map(|_| draw(&mut rng)).collect();
    let anomalous = (0..counts.test)
        .map(|_| {
            normal_vec(&mut rng, p.dim)
                .into_iter()
                .map(|v| v * p.anomaly_std)
                .collect()
        })
        .collect();
    splits(p.dim, train, normal, anomalous)
}

/// Half-open pixel box `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureParams {
    pub size: usize,
    /// Smallest and largest blemish side in pixels.
    pub blemish_side: (usize, usize),
    /// Brightness added inside the blemish.
    pub blemish_gain: f32,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            size: 64,
            blemish_side: (20, 24),
            blemish_gain: 0.35,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TestImage {
    pub id: String,
    pub image: Image,
    /// Set for blemished images.
    pub blemish: Option<BoundingBox>,
}

#[derive(Debug, Clone)]
pub struct TextureSet {
    pub train: Vec<Image>,
    pub test: Vec<TestImage>,
}

impl TextureSet {
    pub fn test_labels(&self) -> Vec<bool> {
        self.test.iter().map(|t| t.blemish.is_some()).collect()
    }
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise on a `cells x cells` lattice, smoothly interpolated, in `[0, 1]`.
fn value_noise(rng: &mut differflow::Rng, size: usize, cells: usize) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random()).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fy = y as f32 / size as f32 * cells as f32;
            let fx = x as f32 / size as f32 * cells as f32;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (smoothstep(fy - iy as f32), smoothstep(fx - ix as f32));
            let at = |yy: usize, xx: usize| lattice[yy * n + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn texture(rng: &mut differflow::Rng, size: usize) -> Image {
    let coarse = value_noise(rng, size, 4);
    let fine = value_noise(rng, size, 8);
    let base: f32 = rng.random_range(0.42..0.48);
    let tint: [f32; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.97..1.03));
    Image::from_fn(size, size, |y, x, c| {
        let i = y * size + x;
        let v = base + 0.3 * (coarse[i] - 0.5) + 0.12 * (fine[i] - 0.5);
        (v * tint[c]).clamp(0.0, 1.0)
    })
}

/// Adds a bright square whose centre lies within a quarter of the image
/// width from the image centre, so it survives rotation.
fn blemish(rng: &mut differflow::Rng, img: &Image, p: &TextureParams) -> (Image, BoundingBox) {
    let size = p.size;
    let side = rng.random_range(p.blemish_side.0..=p.blemish_side.1);
    let reach = size / 4;
    let centre = size / 2;
    let cy = rng.random_range(centre - reach..=centre + reach);
    let cx = rng.random_range(centre - reach..=centre + reach);
    let y0 = cy.saturating_sub(side / 2).min(size - side);
    let x0 = cx.saturating_sub(side / 2).min(size - side);
    let b = BoundingBox {
        y0,
        x0,
        y1: y0 + side,
        x1: x0 + side,
    };
    let out = Image::from_fn(size, size, |y, x, c| {
        let v = img.get(y, x, c);
        if b.contains(y, x) {
            (v + p.blemish_gain).min(1.0)
        } else {
            v
        }
    });
    (out, b)
}

pub fn textures(seed: u64, counts: Counts, p: TextureParams) -> TextureSet {
    let mut rng = differflow::rng(derive_seed(seed, seeds::SYNTH));
    let train = (0..counts.train).map(|_| texture(&mut rng, p.size)).collect();
    let mut test = Vec::with_capacity(2 * counts.test);
    for i in 0..counts.test {
        test.push(TestImage {
            id: format!("good/{i:03}.png"),
            image: texture(&mut rng, p.size),
            blemish: None,
        });
    }
    for i in 0..counts.test {
        let clean = texture(&mut rng, p.size);
        let (image, b) = blemish(&mut rng, &clean, &p);
        test.push(TestImage {
            id: format!("blemish/{i:03}.png"),
            image,
            blemish: Some(b),
        });
    }
    TextureSet { train, test }
}

/// Writes the image tree and `boxes.csv` (`id,y0,x0,y1,x1`).
pub fn write_textures(set: &TextureSet, dir: &Path) -> Result<(), CliError> {
    let train_dir = dir.join("train").join("good");
    std::fs::create_dir_all(&train_dir).map_err(differflow::Error::from)?;
    for (i, img) in set.train.iter().enumerate() {
        img.save_png(train_dir.join(format!("{i:03}.png")))?;
    }
    let mut boxes = String::from("# id,y0,x0,y1,x1\n");
    for t in &set.test {
        let path = dir.join("test").join(&t.id);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(differflow::Error::from)?;
        }
        t.image.save_png(&path)?;
        if let Some(b) = t.blemish {
            writeln!(boxes, "{},{},{},{},{}", t.id, b.y0, b.x0, b.y1, b.x1).expect("writing to a String");
        }
    }
    std::fs::write(dir.join("boxes.csv"), boxes).map_err(differflow::Error::from)?;
    Ok(())
}

pub fn write_features(splits: &FeatureSplits, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(differflow::Error::from)?;
    splits.train.write(dir.join("train.dff"))?;
    splits.test.write(dir.join("test.dff"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: Counts = Counts { train: 2000, test: 10 };

    #[test]
    fn gaussian_sample_mean_is_near_zero() {
        let s = gaussian(3, SMALL, GaussianParams::default());
        let m = s.train.matrix();
        for d in 0..16 {
            let mean: f64 = (0..2000).map(|i| f64::from(m.row(i)[d])).sum::<f64>() / 2000.0;
            // Standard error is 1/sqrt(2000) ~ 0.022.
            assert!(mean.abs() < 0.1, "dim {d}: {mean}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let c = Counts { train: 5, test: 3 };
        assert_eq!(
            mixture(1, c, MixtureParams::default()).test,
            mixture(1, c, MixtureParams::default()).test
        );
        assert_ne!(
            mixture(1, c, MixtureParams::default()).test,
            mixture(2, c, MixtureParams::default()).test
        );
        let a = textures(4, c, TextureParams::default());
        let b = textures(4, c, TextureParams::default());
        assert_eq!(a.train, b.train);
        assert_eq!(a.test.last().unwrap().blemish, b.test.last().unwrap().blemish);
    }

    #[test]
    fn mixture_modes_are_separated() {
        let s = mixture(5, Counts { train: 400, test: 1 }, MixtureParams::default());
        let firsts: Vec<f32> = s.train.records.iter().map(|r| r.features[0]).collect();
        let positive = firsts.iter().filter(|&&v| v > 0.0).count();
        assert!((150..250).contains(&positive), "{positive}");
    }

    #[test]
    fn blemish_box_is_brighter() {
        let set = textures(6, Counts { train: 0, test: 4 }, TextureParams::default());
        for t in set.test.iter().filter(|t| t.blemish.is_some()) {
            let b = t.blemish.unwrap();
            assert!(b.y1 <= 64 && b.x1 <= 64 && b.y1 - b.y0 >= 8);
            let inside = t.image.get((b.y0 + b.y1) / 2, (b.x0 + b.x1) / 2, 0);
            assert!(inside > 0.45, "{inside}");
        }
    }
}
