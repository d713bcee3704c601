//! Run settings: a `key = value` file, overridden by command-line flags.
//!
//! Every key has a flag of the same name with `_` spelled `-`, so
//! `hidden_width = 64` in a file and `--hidden-width 64` on the command line
//! mean the same thing.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use clap::Args;
use differflow::detect::ScoreMode;
use differflow::extractor::MultiScaleConfig;
use differflow::imageops::TransformConfig;
use differflow::training::{AdamConfig, TrainConfig};

use crate::CliError;

/// Where the image features come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractorSource {
    /// The seeded stand-in network.
    Toy,
    /// Weights converted from a pretrained backbone.
    File(String),
}

impl Display for ExtractorSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Toy => f.write_str("toy"),
            Self::File(p) => f.write_str(p),
        }
    }
}

impl FromStr for ExtractorSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "" => Err("empty extractor".into()),
            "toy" => Ok(Self::Toy),
            path => Ok(Self::File(path.to_owned())),
        }
    }
}

/// A blur width, or `auto` for one scaled to the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sigma {
    Auto,
    Fixed(f64),
}

impl Display for Sigma {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Sigma {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "auto" => Ok(Self::Auto),
            v => match v.parse::<f64>() {
                Ok(x) if x > 0.0 && x.is_finite() => Ok(Self::Fixed(x)),
                _ => Err(format!("`{v}` is neither `auto` nor a positive number")),
            },
        }
    }
}

/// Comma separated list of scales.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scales(pub Vec<usize>);

impl Display for Scales {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Scales {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if v.is_empty() || v.contains(&0) {
            return Err("scales must be positive".into());
        }
        Ok(Self(v))
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $key: $default, )* }
            }
        }

        impl RunConfig {
            /// Every key, in file order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($key), )*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $( stringify!($key) => {
                        self.$key = value.trim().parse::<$ty>().map_err(|e| format!("`{key}`: {e}"))?;
                    } )*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// The settings as a config file; reading it back gives `self`.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( out.push_str(&format!("{} = {}\n", stringify!($key), self.$key)); )*
                out
            }
        }

        /// Flag overrides, one per config key.
        #[derive(Debug, Clone, Default, Args)]
        pub struct ConfigArgs {
            /// Config file of `key = value` lines; flags below override it.
            #[arg(long, value_name = "FILE")]
            pub config: Option<std::path::PathBuf>,
            $(
                $(#[doc = $doc])*
                #[arg(long, value_name = "VALUE", help_heading = "Run settings")]
                pub $key: Option<$ty>,
            )*
        }

        impl ConfigArgs {
            fn apply(&self, c: &mut RunConfig) {
                $( if let Some(v) = &self.$key { c.$key = v.clone(); } )*
            }
        }
    };
}

run_config! {
    /// Seed from which every random draw of a run derives.
    seed: u64 = 0,
    epochs: usize = 192,
    batch_size: usize = 96,
    learning_rate: f64 = 2e-4,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    /// Coupling blocks in the flow.
    blocks: usize = 8,
    /// Bound of the soft clamp on the scale outputs.
    clamp_alpha: f64 = 3.0,
    hidden_width: usize = 2048,
    hidden_layers: usize = 3,
    /// Share of the training set held out for a validation loss.
    validation_fraction: f64 = 0.1,
    /// Draw random transforms of the training images every epoch.
    train_transforms: bool = true,
    /// Transformed views per training image and epoch.
    train_transform_count: usize = 1,
    /// Transforms averaged per test sample; 1 scores the untouched image.
    test_transform_count: usize = 64,
    /// Also vary brightness and contrast, not just the angle.
    transform_factors: bool = false,
    /// Use all scales rather than only the largest.
    multi_scale: bool = true,
    /// Input sizes fed to the extractor.
    scales: Scales = Scales(vec![448, 224, 112]),
    /// `toy` or the path of an extractor weight file.
    extractor: ExtractorSource = ExtractorSource::Toy,
    /// `latent` scores with the latent term only; `nll` adds the log-determinant.
    score: ScoreMode = ScoreMode::Latent,
    /// Rotated copies averaged into a gradient map.
    rotations: usize = 8,
    /// Blur of the gradient map in pixels, or `auto`.
    blur_sigma: Sigma = Sigma::Auto,
}

impl RunConfig {
    /// Parses a config file. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| CliError::Config { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            c.set(key.trim(), value).map_err(bad)?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Defaults, then the config file if any, then flags.
    pub fn resolve(args: &ConfigArgs) -> Result<Self, CliError> {
        let mut c = match &args.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        args.apply(&mut c);
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            blocks: self.blocks,
            clamp_alpha: self.clamp_alpha,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
        }
    }

    pub fn scale_config(&self) -> MultiScaleConfig {
        MultiScaleConfig {
            scales: self.scales.0.clone(),
            multi_scale: self.multi_scale,
        }
    }

    pub fn transform_config(&self) -> TransformConfig {
        TransformConfig {
            rotate: true,
            factors: self.transform_factors,
        }
    }
}
