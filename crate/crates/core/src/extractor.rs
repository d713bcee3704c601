//! Frozen multi-scale convolutional feature extractor.
//!
//! For every scale the image is resized to `s x s`, normalised per channel,
//! passed through the conv chain and globally average pooled. The pooled
//! vectors are concatenated largest scale first. The whole path is recorded
//! in a graph so gradients reach the input pixels.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::autodiff::{Bindings, Graph, GraphBuilder, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, FlowNodes};
use crate::imageops::{Image, CHANNELS};

/// One stage of the convolutional chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => write!(
                f,
                "conv:{in_channels}:{out_channels}:{kernel_h}:{kernel_w}:{stride}:{padding}"
            ),
            Layer::Relu => write!(f, "relu"),
            Layer::MaxPool { kernel, stride } => write!(f, "maxpool:{kernel}:{stride}"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let nums = |xs: &[&str]| -> Result<Vec<usize>> {
            xs.iter()
                .map(|x| {
                    x.parse::<usize>()
                        .map_err(|_| Error::Corrupt(format!("bad layer field `{x}` in `{s}`")))
                })
                .collect()
        };
        match parts.as_slice() {
            ["relu"] => Ok(Layer::Relu),
            ["maxpool", rest @ ..] if rest.len() == 2 => {
                let n = nums(rest)?;
                Ok(Layer::MaxPool {
                    kernel: n[0],
                    stride: n[1],
                })
            }
            ["conv", rest @ ..] if rest.len() == 6 => {
                let n = nums(rest)?;
                Ok(Layer::Conv {
                    in_channels: n[0],
                    out_channels: n[1],
                    kernel_h: n[2],
                    kernel_w: n[3],
                    stride: n[4],
                    padding: n[5],
                })
            }
            _ => Err(Error::Corrupt(format!("unknown layer `{s}`"))),
        }
    }
}

/// Layer chain ending in global average pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvNetSpec {
    pub layers: Vec<Layer>,
}

impl ConvNetSpec {
    /// Channel count after the chain; fails if the chain does not type-check.
    pub fn output_channels(&self) -> Result<usize> {
        let mut channels = CHANNELS;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    ..
                } => {
                    if in_channels != channels {
                        return Err(Error::Shape(format!(
                            "layer {i} expects {in_channels} channels but receives {channels}"
                        )));
                    }
                    if out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                        return Err(Error::InvalidArgument(format!("degenerate conv at layer {i}")));
                    }
                    channels = out_channels;
                }
                Layer::MaxPool { kernel, stride } if kernel == 0 || stride == 0 => {
                    return Err(Error::InvalidArgument(format!("degenerate pool at layer {i}")));
                }
                _ => {}
            }
        }
        Ok(channels)
    }

    /// `;`-separated layer list, the form stored in weight files.
    pub fn to_metadata(&self) -> String {
        self.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";")
    }

    pub fn from_metadata(s: &str) -> Result<Self> {
        let layers = s
            .split(';')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }
}

/// Per-channel input normalisation `(v - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Preprocess {
    pub const IDENTITY: Self = Self {
        mean: [0.0; CHANNELS],
        std: [1.0; CHANNELS],
    };

    /// ImageNet statistics used by torchvision backbones.
    pub const IMAGENET: Self = Self {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

/// Conv chain plus frozen weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub spec: ConvNetSpec,
    pub preprocess: Preprocess,
    /// `(weight [O, C, kh, kw], bias [O])` for every conv layer, in chain order.
    pub weights: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl Extractor {
    pub fn new(spec: ConvNetSpec, preprocess: Preprocess, weights: Vec<(Tensor<f32>, Tensor<f32>)>) -> Result<Self> {
        let e = Self {
            spec,
            preprocess,
            weights,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.output_channels()?;
        if self.preprocess.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::InvalidArgument("preprocessing std must be positive".into()));
        }
        let convs: Vec<&Layer> = self
            .spec
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. }))
            .collect();
        if convs.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "{} conv layers but {} weight pairs",
                convs.len(),
                self.weights.len()
            )));
        }
        for (i, (layer, (w, b))) in convs.iter().zip(&self.weights).enumerate() {
            if let Layer::Conv {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } = **layer
            {
                if w.shape() != [out_channels, in_channels, kernel_h, kernel_w] || b.shape() != [out_channels] {
                    return Err(Error::Shape(format!(
                        "conv {i}: weight {:?} / bias {:?} do not match {layer}",
                        w.shape(),
                        b.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.spec.output_channels().expect("validated spec")
    }

    /// Graph leaf names of the `i`-th conv layer's weight and bias.
    pub fn weight_names(i: usize) -> (String, String) {
        (format!("extractor.conv{i}.weight"), format!("extractor.conv{i}.bias"))
    }

    /// Records the multi-scale feature map of `image: [N, 3, H, W]`.
    pub fn build(&self, b: &mut GraphBuilder, image: NodeId, config: &MultiScaleConfig) -> Result<NodeId> {
        let scales = config.active_scales()?;
        let mut pooled = Vec::with_capacity(scales.len());
        for s in scales {
            let mut h = b.resize(image, s, s);
            if self.preprocess != Preprocess::IDENTITY {
                let p = &self.preprocess;
                let scale = p.std.iter().map(|s| 1.0 / s).collect();
                let shift = p.mean.iter().zip(&p.std).map(|(m, s)| -m / s).collect();
                h = b.channel_affine(h, scale, shift);
            }
            let mut conv = 0;
            for layer in &self.spec.layers {
                h = match *layer {
                    Layer::Conv {
                        stride,
                        padding,
                        out_channels,
                        in_channels,
                        kernel_h,
                        kernel_w,
                    } => {
                        let (wn, bn) = Self::weight_names(conv);
                        conv += 1;
                        let w = b.leaf(wn, &[out_channels, in_channels, kernel_h, kernel_w]);
                        let bias = b.leaf(bn, &[out_channels]);
                        b.conv2d(h, w, Some(bias), stride, padding)
                    }
                    Layer::Relu => b.relu(h),
                    Layer::MaxPool { kernel, stride } => b.max_pool2d(h, kernel, stride),
                };
            }
            pooled.push(b.global_avg_pool(h));
        }
        Ok(if pooled.len() == 1 {
            pooled[0]
        } else {
            b.concat(&pooled)
        })
    }

    /// Binds the conv weights (converted to `T`).
    pub fn bind<'a, T: Real>(&'a self, bindings: &mut Bindings<'a, T>) {
        for (i, (w, bias)) in self.weights.iter().enumerate() {
            let (wn, bn) = Self::weight_names(i);
            bindings.bind_cow(wn, T::from_f32_tensor(w));
            bindings.bind_cow(bn, T::from_f32_tensor(bias));
        }
    }
}

/// Small seeded stand-in for a pretrained backbone:
/// `conv 3->8, relu, pool, conv 8->16, relu, pool, conv 16->16, relu`.
/// The pools are 3x3 with stride 2; overlapping windows keep the input
/// gradient from collapsing onto one pixel per window.
pub fn toy_extractor(seed: u64) -> Extractor {
    let conv = |i, o| Layer::Conv {
        in_channels: i,
        out_channels: o,
        kernel_h: 3,
        kernel_w: 3,
        stride: 1,
        padding: 1,
    };
    let pool = Layer::MaxPool { kernel: 3, stride: 2 };
    let spec = ConvNetSpec {
        layers: vec![
            conv(3, 8),
            Layer::Relu,
            pool,
            conv(8, 16),
            Layer::Relu,
            pool,
            conv(16, 16),
            Layer::Relu,
        ],
    };
    let mut rng = crate::rng(seed);
    let weights = [(3, 8), (8, 16), (16, 16)]
        .into_iter()
        .enumerate()
        .map(|(k, (i, o))| {
            let limit = (6.0 / (i * 9) as f32).sqrt();
            let w = Tensor::from_fn([o, i, 3, 3], |_| rng.random_range(-limit..=limit));
            // The last layer sits below zero so ordinary texture leaves most
            // of its units off and input gradients stay near what is unusual.
            let shift = if k == 2 { -0.5 } else { 0.0 };
            let b = Tensor::from_fn([o], |_| rng.random_range(-0.1..=0.1f32) + shift);
            (w, b)
        })
        .collect();
    Extractor::new(
        spec,
        Preprocess {
            mean: [0.5; CHANNELS],
            std: [0.25; CHANNELS],
        },
        weights,
    )
    .expect("toy extractor is well formed")
}

/// Input sizes fed to the extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiScaleConfig {
    pub scales: Vec<usize>,
    /// When off only the largest scale is used.
    pub multi_scale: bool,
}

impl Default for MultiScaleConfig {
    fn default() -> Self {
        Self {
            scales: vec![448, 224, 112],
            multi_scale: true,
        }
    }
}

impl MultiScaleConfig {
    /// Scales in concatenation order: largest first.
    pub fn active_scales(&self) -> Result<Vec<usize>> {
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid scales {:?}", self.scales)));
        }
        let mut s = self.scales.clone();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s.dedup();
        if !self.multi_scale {
            s.truncate(1);
        }
        Ok(s)
    }

    pub fn feature_dim(&self, channels: usize) -> Result<usize> {
        Ok(self.active_scales()?.len() * channels)
    }
}

/// Extractor recorded into a reusable graph.
#[derive(Debug)]
pub struct FeaturePipeline {
    extractor: Extractor,
    config: MultiScaleConfig,
    graph: Graph,
    features: NodeId,
}

const IMAGE_INPUT: &str = "image";

impl FeaturePipeline {
    pub fn new(extractor: Extractor, config: MultiScaleConfig) -> Result<Self> {
        extractor.validate()?;
        let mut b = GraphBuilder::new();
        let image = b.leaf_pattern(IMAGE_INPUT, &[None, Some(CHANNELS), None, None]);
        let features = extractor.build(&mut b, image, &config)?;
        b.output("features", features);
        Ok(Self {
            extractor,
            config,
            graph: b.build(),
            features,
        })
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn config(&self) -> &MultiScaleConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config
            .feature_dim(self.extractor.channels())
            .expect("validated config")
    }

    /// Feature vector `[D]` of one image.
    pub fn extract<T: Real>(&self, img: &Image) -> Result<Tensor<T>> {
        let input = img.to_nchw::<T>();
        let mut bindings = Bindings::new();
        self.extractor.bind(&mut bindings);
        bindings.bind(IMAGE_INPUT, &input);
        let exec = self.graph.evaluate(bindings)?;
        exec.value(self.features).clone().reshape([self.feature_dim()])
    }

    /// `[N, D]` features; images are processed in parallel, rows keep input order.
    pub fn extract_batch(&self, images: &[Image]) -> Result<Tensor<f32>> {
        let rows: Vec<Tensor<f32>> = images
            .par_iter()
            .map(|img| self.extract::<f32>(img))
            .collect::<Result<_>>()?;
        let d = self.feature_dim();
        let data = rows.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new([images.len(), d], data)
    }
}

/// Extractor and flow recorded into one graph, for gradients of the NLL
/// with respect to input pixels.
#[derive(Debug)]
pub struct InputGradient<'m> {
    pipeline: &'m FeaturePipeline,
    model: &'m FlowModel,
    graph: Graph,
    image: NodeId,
    flow: FlowNodes,
}

impl<'m> InputGradient<'m> {
    pub fn new(pipeline: &'m FeaturePipeline, model: &'m FlowModel) -> Result<Self> {
        if pipeline.feature_dim() != model.dim() {
            return Err(Error::Shape(format!(
                "extractor yields {} features, flow expects {}",
                pipeline.feature_dim(),
                model.dim()
            )));
        }
        let mut b = GraphBuilder::new();
        let image = b.leaf_pattern(IMAGE_INPUT, &[Some(1), Some(CHANNELS), None, None]);
        let features = pipeline.extractor.build(&mut b, image, &pipeline.config)?;
        let flow = model.build(&mut b, features)?;
        Ok(Self {
            pipeline,
            model,
            graph: b.build(),
            image,
            flow,
        })
    }

    /// NLL of the image and its gradient `[3, H, W]` (one plane per channel).
    pub fn compute<T: Real>(&self, img: &Image) -> Result<(T, Tensor<T>)> {
        let input = img.to_nchw::<T>();
        let mut bindings = Bindings::new();
        self.pipeline.extractor.bind(&mut bindings);
        self.model.bind(&mut bindings);
        bindings.bind(IMAGE_INPUT, &input);
        let exec = self.graph.evaluate(bindings)?;
        let nll = exec.value(self.flow.nll_sum).data()[0];
        let grads = exec.backward_wrt(self.flow.nll_sum, &Tensor::scalar(T::one()), &[self.image])?;
        let g = grads.node(self.image).expect("image gradient").clone();
        Ok((nll, g.reshape([CHANNELS, img.height(), img.width()])?))
    }
}

/// Gradient of `nll(flow(extract(img)))` with respect to every input pixel.
pub fn input_gradient<T: Real>(pipeline: &FeaturePipeline, model: &FlowModel, img: &Image) -> Result<Tensor<T>> {
    Ok(InputGradient::new(pipeline, model)?.compute::<T>(img)?.1)
}
