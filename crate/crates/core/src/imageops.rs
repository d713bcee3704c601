//! RGB float images, PNG I/O and the augmentation transforms
//! (rotation, brightness, contrast).

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::autodiff::{kernels, Real, Tensor};
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Range of the sampled brightness and contrast factors.
pub const FACTOR_RANGE: (f64, f64) = (0.85, 1.15);

/// Three-channel image, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, data }
    }

    /// Single-channel values replicated over the three channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f32]) -> Result<Self> {
        if gray.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} gray image needs {} values, got {}",
                height * width,
                gray.len()
            )));
        }
        Self::new(height, width, gray.iter().flat_map(|&v| [v; CHANNELS]).collect())
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self::from_fn(height, width, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// `[1, 3, H, W]` tensor for the extractor.
    pub fn to_nchw<T: Real>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..CHANNELS {
            for p in 0..h * w {
                out.push(T::lit(self.data[p * CHANNELS + c] as f64));
            }
        }
        Tensor::new([1, CHANNELS, h, w], out).expect("image tensor shape")
    }

    /// Decodes a PNG (8 or 16 bit, gray or colour) into `[0, 1]` floats.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_byte(v as f64)).collect();
        write_png(path.as_ref(), self.width, self.height, image::ColorType::Rgb8, &bytes)
    }
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn write_png(path: &Path, width: usize, height: usize, color: image::ColorType, bytes: &[u8]) -> Result<()> {
    image::save_buffer_with_format(path, bytes, width as u32, height as u32, color, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Rotates interleaved `[H, W, channels]` data about the image centre.
///
/// Output pixel `p` samples the source at `c + R(angle) (p - c)` with
/// bilinear interpolation; coordinates outside the image are clamped to the
/// nearest edge. With image axes `x` right and `y` down, a positive angle
/// turns the content clockwise on screen.
pub fn rotate_interleaved(data: &[f32], height: usize, width: usize, channels: usize, angle: f64) -> Vec<f32> {
    if angle == 0.0 {
        return data.to_vec();
    }
    let (sin, cos) = angle.sin_cos();
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let (max_x, max_y) = ((width - 1) as f64, (height - 1) as f64);
    let mut out = Vec::with_capacity(data.len());
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = (cx + cos * dx + sin * dy).clamp(0.0, max_x);
            let sy = (cy - sin * dx + cos * dy).clamp(0.0, max_y);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..channels {
                let at = |yy: usize, xx: usize| data[(yy * width + xx) * channels + c] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    out
}

/// Rotation about the centre; see [`rotate_interleaved`] for conventions.
pub fn rotate(img: &Image, angle: f64) -> Image {
    let data = rotate_interleaved(&img.data, img.height, img.width, CHANNELS, angle);
    Image {
        height: img.height,
        width: img.width,
        data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    }
}

/// `v' = clip(((v - m) * contrast + m) * brightness)` with `m` the image mean.
pub fn adjust(img: &Image, brightness: f64, contrast: f64) -> Result<Image> {
    if !(brightness > 0.0 && contrast > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "brightness and contrast must be positive, got {brightness} and {contrast}"
        )));
    }
    if brightness == 1.0 && contrast == 1.0 {
        return Ok(img.clone());
    }
    let m = img.mean();
    let data = img
        .data
        .iter()
        .map(|&v| ((((v as f64 - m) * contrast + m) * brightness).clamp(0.0, 1.0)) as f32)
        .collect();
    Ok(Image {
        height: img.height,
        width: img.width,
        data,
    })
}

/// Bilinear resampling with half-pixel centres.
pub fn resize(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("cannot resize to {height}x{width}")));
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let planar: Tensor<f64> = img.to_nchw();
    let out = kernels::resize_planes(planar.data(), CHANNELS, img.height, img.width, height, width);
    let plane = height * width;
    Ok(Image::from_fn(height, width, |y, x, c| {
        out[c * plane + y * width + x] as f32
    }))
}

/// One member of the transform family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    /// Rotation in radians.
    pub angle: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl TransformSpec {
    pub const IDENTITY: Self = Self {
        angle: 0.0,
        brightness: 1.0,
        contrast: 1.0,
    };

    /// Rotation first, then brightness and contrast.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        adjust(&rotate(img, self.angle), self.brightness, self.contrast)
    }
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Which parts of the transform family are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformConfig {
    pub rotate: bool,
    /// Brightness and contrast factors; off for datasets without them.
    pub factors: bool,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            factors: true,
        }
    }
}

/// Draws one random transform.
pub fn random_transform(rng: &mut crate::Rng, config: &TransformConfig) -> TransformSpec {
    let (lo, hi) = FACTOR_RANGE;
    let angle = if config.rotate { rng.random_range(0.0..TAU) } else { 0.0 };
    let (brightness, contrast) = if config.factors {
        (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
    } else {
        (1.0, 1.0)
    };
    TransformSpec {
        angle,
        brightness,
        contrast,
    }
}

/// `count` transforms from `seed`; a count of one means the untouched image.
pub fn sample_transforms(seed: u64, count: usize, config: &TransformConfig) -> Result<Vec<TransformSpec>> {
    match count {
        0 => Err(Error::InvalidArgument("transform count must be at least 1".into())),
        1 => Ok(vec![TransformSpec::IDENTITY]),
        _ => {
            let mut rng = crate::rng(seed);
            Ok((0..count).map(|_| random_transform(&mut rng, config)).collect())
        }
    }
}

/// Test sample located by [`Dataset::scan`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSample {
    pub path: PathBuf,
    /// Name of the containing directory (`good` for normal samples).
    pub category: String,
    /// `0` for `good`, `1` otherwise.
    pub label: i8,
}

impl TestSample {
    /// `category/file_name`, used as the sample id in score files.
    pub fn id(&self) -> String {
        let file = self
            .path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}/{}", self.category, file)
    }
}

/// Image dataset in the `train/good`, `test/<category>` layout.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<PathBuf>,
    pub test: Vec<TestSample>,
}

fn pngs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

impl Dataset {
    /// Lists PNG files in sorted order. Missing directories yield empty lists.
    pub fn scan(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        if !root.is_dir() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("dataset directory {} not found", root.display()),
            )));
        }
        let train = pngs_in(&root.join("train").join("good"))?;
        let mut test = Vec::new();
        let test_root = root.join("test");
        if test_root.is_dir() {
            let mut categories: Vec<PathBuf> = std::fs::read_dir(&test_root)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            categories.sort();
            for dir in categories {
                let category = dir.file_name().expect("dir name").to_string_lossy().into_owned();
                let label = if category == "good" { 0 } else { 1 };
                for path in pngs_in(&dir)? {
                    test.push(TestSample {
                        path,
                        category: category.clone(),
                        label,
                    });
                }
            }
        }
        Ok(Self { train, test })
    }
}
