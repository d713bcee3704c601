//! Binary weight and feature files.
//!
//! Every integer is little-endian and every payload float is a 32-bit IEEE
//! value, so files are byte-identical across platforms.
//!
//! Tensor file (`DFN1`):
//!
//! ```text
//! magic "DFN1" | version u32 | metadata length u32 | metadata (UTF-8 "key=value\n" lines)
//! tensor count u32 | per tensor: name length u32, name, rank u32, dims u32 x rank, f32 x product(dims)
//! ```
//!
//! Feature file (`DFF1`):
//!
//! ```text
//! magic "DFF1" | version u32 | dim u32 | record count u64
//! per record: id length u32, id, label i8, transform id u32, f32 x dim
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::autodiff::{checked_numel, Tensor};
use crate::error::{Error, Result};
use crate::extractor::{ConvNetSpec, Extractor, MultiScaleConfig, Preprocess};
use crate::flow::{CouplingBlock, Dense, FlowConfig, FlowModel, Subnet};
use crate::imageops::CHANNELS;

pub const TENSOR_MAGIC: [u8; 4] = *b"DFN1";
pub const FEATURE_MAGIC: [u8; 4] = *b"DFF1";
pub const VERSION: u32 = 1;

/// Ordered `key=value` pairs. Keys the reader does not understand survive a
/// round trip untouched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Replaces an existing value in place or appends a new key.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> Result<()> {
        let key = key.into();
        let value = value.to_string();
        if key.is_empty() || key.contains(['=', '\n']) || value.contains('\n') {
            return Err(Error::InvalidArgument(format!("unstorable metadata entry `{key}`")));
        }
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Required key, parsed.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Corrupt(format!("missing metadata key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Corrupt(format!("metadata `{key}` has unparsable value `{raw}`")))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Corrupt(format!("missing metadata key `{key}`")))?;
        raw.split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Corrupt(format!("metadata `{key}` has unparsable item `{s}`")))
            })
            .collect()
    }

    fn encode(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn decode(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("metadata line {} lacks `=`", n + 1)))?;
            entries.push((k.to_owned(), v.to_owned()));
        }
        Ok(Self { entries })
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Truncated(format!(
                "{} needs {n} bytes, {} left",
                what(),
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: impl FnOnce() -> String) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn string(&mut self, what: impl Fn() -> String) -> Result<String> {
        let n = self.u32(&what)? as usize;
        let bytes = self.take(n, &what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt(format!("{} is not UTF-8", what())))
    }

    fn floats(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Corrupt("payload size overflows".into()))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found = self.array(|| "magic".into())?;
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let version = self.u32(|| "version".into())?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(Error::Corrupt(format!("{n} trailing bytes"))),
        }
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} ({n}) exceeds u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    out.extend_from_slice(&u32_len(s.len(), what)?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_floats(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Named `f32` tensors plus metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub metadata: Metadata,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.metadata.encode(), "metadata length")?;
        out.extend_from_slice(&u32_len(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name, "tensor name length")?;
            out.extend_from_slice(&u32_len(t.rank(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
            }
            put_floats(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(TENSOR_MAGIC)?;
        let metadata = Metadata::decode(&r.string(|| "metadata".into())?)?;
        let count = r.u32(|| "tensor count".into())?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let name = r.string(|| format!("tensor {i} name"))?;
            let rank = r.u32(|| format!("tensor `{name}` rank"))? as usize;
            // Each dim takes 4 bytes; refuse ranks the file cannot hold before allocating.
            if rank > r.remaining() / 4 {
                return Err(Error::Truncated(format!("tensor `{name}` declares rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| r.u32(|| format!("tensor `{name}` dims")).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n =
                checked_numel(&dims).map_err(|_| Error::Corrupt(format!("tensor `{name}` dims {dims:?} overflow")))?;
            let data = r.floats(n, || format!("tensor `{name}` payload"))?;
            tensors.push((name, Tensor::new(dims, data)?));
        }
        r.finish()?;
        Ok(Self { metadata, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// One extracted feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: String,
    /// -1 unknown, 0 normal, 1 anomalous.
    pub label: i8,
    pub transform_id: u32,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureFile {
    pub fn new(dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let f = Self { dim, records };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.features.len() != self.dim {
                return Err(Error::Shape(format!(
                    "record {i} has {} features, file dimension is {}",
                    r.features.len(),
                    self.dim
                )));
            }
            if !(-1..=1).contains(&r.label) {
                return Err(Error::Corrupt(format!("record {i} has label {}", r.label)));
            }
            if !seen.insert((r.sample_id.as_str(), r.transform_id)) {
                return Err(Error::Corrupt(format!(
                    "record {i} repeats sample `{}` transform {}",
                    r.sample_id, r.transform_id
                )));
            }
        }
        Ok(())
    }

    /// All vectors as `[N, D]`, in record order.
    pub fn matrix(&self) -> Tensor<f32> {
        let data = self.records.iter().flat_map(|r| r.features.iter().copied()).collect();
        Tensor::new([self.records.len(), self.dim], data).expect("validated records")
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.dim, "feature dimension")?.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.sample_id, "sample id length")?;
            out.extend_from_slice(&r.label.to_le_bytes());
            out.extend_from_slice(&r.transform_id.to_le_bytes());
            put_floats(&mut out, &r.features);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(FEATURE_MAGIC)?;
        let dim = r.u32(|| "feature dimension".into())? as usize;
        let count = u64::from_le_bytes(r.array(|| "record count".into())?);
        // A record needs at least 9 header bytes, which bounds the preallocation.
        let cap = usize::try_from(count).unwrap_or(usize::MAX).min(r.remaining() / 9);
        let mut records = Vec::with_capacity(cap);
        for i in 0..count {
            let what = || format!("record {i}");
            let sample_id = r.string(what)?;
            let label = i8::from_le_bytes(r.array(what)?);
            let transform_id = r.u32(what)?;
            let features = r.floats(dim, what)?;
            records.push(FeatureRecord {
                sample_id,
                label,
                transform_id,
                features,
            });
        }
        r.finish()?;
        Self::new(dim, records)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Feature pipeline recorded alongside an image-mode model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorSetup {
    pub extractor: Extractor,
    pub scales: MultiScaleConfig,
}

fn put_extractor(file: &mut TensorFile, setup: &ExtractorSetup) -> Result<()> {
    let e = &setup.extractor;
    let m = &mut file.metadata;
    m.set("extractor.layers", e.spec.to_metadata())?;
    m.set("extractor.preprocess.mean", join(&e.preprocess.mean))?;
    m.set("extractor.preprocess.std", join(&e.preprocess.std))?;
    m.set("extractor.scales", join(&setup.scales.scales))?;
    m.set("extractor.multi_scale", setup.scales.multi_scale)?;
    for (i, (w, b)) in e.weights.iter().enumerate() {
        let (wn, bn) = Extractor::weight_names(i);
        file.tensors.push((wn, w.clone()));
        file.tensors.push((bn, b.clone()));
    }
    Ok(())
}

fn channel_triple(m: &Metadata, key: &str) -> Result<[f64; CHANNELS]> {
    m.parse_list::<f64>(key)?
        .try_into()
        .map_err(|v: Vec<f64>| Error::Corrupt(format!("`{key}` holds {} values, expected {CHANNELS}", v.len())))
}

fn get_extractor(file: &TensorFile) -> Result<ExtractorSetup> {
    let m = &file.metadata;
    let spec = ConvNetSpec::from_metadata(m.get("extractor.layers").unwrap_or_default())?;
    let preprocess = Preprocess {
        mean: channel_triple(m, "extractor.preprocess.mean")?,
        std: channel_triple(m, "extractor.preprocess.std")?,
    };
    let mut weights = Vec::new();
    let mut i = 0;
    while let Some(w) = file.get(&Extractor::weight_names(i).0) {
        let (_, bn) = Extractor::weight_names(i);
        let b = file
            .get(&bn)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor `{bn}`")))?;
        weights.push((w.clone(), b.clone()));
        i += 1;
    }
    let extractor = Extractor::new(spec, preprocess, weights)?;
    let defaults = MultiScaleConfig::default();
    let scales = MultiScaleConfig {
        scales: match m.get("extractor.scales") {
            Some(_) => m.parse_list("extractor.scales")?,
            None => defaults.scales,
        },
        multi_scale: match m.get("extractor.multi_scale") {
            Some(_) => m.parse("extractor.multi_scale")?,
            None => defaults.multi_scale,
        },
    };
    scales.active_scales()?;
    Ok(ExtractorSetup { extractor, scales })
}

/// Stand-alone backbone weights, e.g. converted from a model zoo.
pub fn extractor_to_file(setup: &ExtractorSetup) -> Result<TensorFile> {
    let mut file = TensorFile::default();
    file.metadata.set("format", "extractor")?;
    put_extractor(&mut file, setup)?;
    Ok(file)
}

pub fn extractor_from_file(file: &TensorFile) -> Result<ExtractorSetup> {
    get_extractor(file)
}

/// A trained flow, optionally bundled with the extractor that fed it.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub flow: FlowModel,
    /// Present when the model was trained from images; needed for localization.
    pub extractor: Option<ExtractorSetup>,
    /// Extra keys (training settings and anything unrecognised).
    pub metadata: Metadata,
}

const FLOW_KEYS: [&str; 6] = [
    "flow.dim",
    "flow.blocks",
    "flow.hidden_width",
    "flow.hidden_layers",
    "flow.alpha",
    "flow.seed",
];

fn is_reserved(key: &str) -> bool {
    key == "format" || key == "source" || key.starts_with("flow.") || key.starts_with("extractor.")
}

impl SavedModel {
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        self.flow.validate()?;
        let c = &self.flow.config;
        let mut file = TensorFile::default();
        let m = &mut file.metadata;
        m.set("format", "flow-model")?;
        m.set("source", if self.extractor.is_some() { "images" } else { "features" })?;
        m.set("flow.dim", c.dim)?;
        m.set("flow.blocks", c.blocks)?;
        m.set("flow.hidden_width", c.hidden_width)?;
        m.set("flow.hidden_layers", c.hidden_layers)?;
        m.set("flow.alpha", c.alpha)?;
        m.set("flow.seed", self.flow.seed)?;
        for (i, block) in self.flow.blocks.iter().enumerate() {
            m.set(format!("flow.block{i}.permutation"), join(&block.permutation))?;
        }
        for (k, v) in self.metadata.iter() {
            if is_reserved(k) {
                return Err(Error::InvalidArgument(format!("metadata key `{k}` is reserved")));
            }
            m.set(k, v)?;
        }
        for (name, t) in self.flow.parameters() {
            file.tensors.push((name, t.clone()));
        }
        if let Some(setup) = &self.extractor {
            put_extractor(&mut file, setup)?;
        }
        Ok(file)
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let m = &file.metadata;
        if m.get("format") != Some("flow-model") {
            return Err(Error::Corrupt(format!(
                "not a flow model file (format = {:?})",
                m.get("format")
            )));
        }
        let config = FlowConfig {
            dim: m.parse(FLOW_KEYS[0])?,
            blocks: m.parse(FLOW_KEYS[1])?,
            hidden_width: m.parse(FLOW_KEYS[2])?,
            hidden_layers: m.parse(FLOW_KEYS[3])?,
            alpha: m.parse(FLOW_KEYS[4])?,
        };
        config.validate()?;
        let seed = m.parse(FLOW_KEYS[5])?;
        let half = config.dim / 2;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let permutation = m.parse_list(&format!("flow.block{i}.permutation"))?;
            let subnet = |j: usize| -> Result<Subnet> {
                let layers = (0..=config.hidden_layers)
                    .map(|k| {
                        let inputs = if k == 0 { half } else { config.hidden_width };
                        let outputs = if k == config.hidden_layers {
                            config.dim
                        } else {
                            config.hidden_width
                        };
                        let prefix = format!("flow.block{i}.subnet{j}.layer{k}");
                        Ok(Dense {
                            weight: file.require(&format!("{prefix}.weight"), &[inputs, outputs])?,
                            bias: file.require(&format!("{prefix}.bias"), &[outputs])?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(Subnet { layers })
            };
            blocks.push(CouplingBlock {
                permutation,
                subnets: [subnet(0)?, subnet(1)?],
            });
        }
        let flow = FlowModel { config, seed, blocks };
        flow.validate()?;
        let extractor = match m.get("source") {
            Some("images") => Some(get_extractor(file)?),
            Some("features") => None,
            other => return Err(Error::Corrupt(format!("unknown model source {other:?}"))),
        };
        let mut metadata = Metadata::new();
        for (k, v) in m.iter().filter(|(k, _)| !is_reserved(k)) {
            metadata.set(k, v)?;
        }
        Ok(Self {
            flow,
            extractor,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::toy_extractor;

    fn small_flow() -> FlowModel {
        let mut f = FlowModel::new(
            FlowConfig {
                dim: 4,
                blocks: 2,
                hidden_width: 6,
                hidden_layers: 1,
                alpha: 3.0,
            },
            11,
        )
        .unwrap();
        f.randomize_output_layers(12, 0.3);
        f
    }

    #[test]
    fn empty_tensor_file_bytes() {
        let bytes = TensorFile::default().encode().unwrap();
        assert_eq!(bytes, b"DFN1\x01\0\0\0\0\0\0\0\0\0\0\0");
        assert_eq!(TensorFile::decode(&bytes).unwrap(), TensorFile::default());
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = TensorFile::default().encode().unwrap();
        bytes[0] = b'X';
        assert!(matches!(TensorFile::decode(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = TensorFile::default().encode().unwrap();
        bytes[4] = 2;
        assert!(matches!(TensorFile::decode(&bytes), Err(Error::UnsupportedVersion(2))));
        assert!(matches!(FeatureFile::decode(b"DFN1"), Err(Error::BadMagic { .. })));
        assert!(matches!(TensorFile::decode(b"DF"), Err(Error::Truncated(_))));
    }

    #[test]
    fn truncated_and_overflowing_tensors() {
        let mut file = TensorFile::default();
        file.tensors.push(("w".into(), Tensor::from_fn([2, 3], |i| i as f32)));
        let bytes = file.encode().unwrap();
        assert!(matches!(
            TensorFile::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));

        let mut huge = b"DFN1\x01\0\0\0\0\0\0\0\x01\0\0\0\x01\0\0\0w\x03\0\0\0".to_vec();
        huge.extend_from_slice(&[0xff; 12]);
        // Three dims of u32::MAX: the element count overflows and nothing is allocated.
        assert!(matches!(TensorFile::decode(&huge), Err(Error::Corrupt(_))));
    }

    #[test]
    fn unknown_metadata_survives() {
        let mut saved = SavedModel {
            flow: small_flow(),
            extractor: None,
            metadata: Metadata::new(),
        };
        saved.metadata.set("train_transforms", true).unwrap();
        let mut file = saved.to_tensor_file().unwrap();
        file.metadata.set("written_by", "elsewhere=1").unwrap();
        let again = TensorFile::decode(&file.encode().unwrap()).unwrap();
        assert_eq!(again, file);
        let loaded = SavedModel::from_tensor_file(&again).unwrap();
        assert_eq!(loaded.flow, saved.flow);
        assert_eq!(loaded.metadata.get("written_by"), Some("elsewhere=1"));
        assert_eq!(loaded.metadata.get("train_transforms"), Some("true"));
    }

    #[test]
    fn model_with_extractor_round_trips() {
        let saved = SavedModel {
            flow: FlowModel::new(
                FlowConfig {
                    dim: 32,
                    blocks: 1,
                    hidden_width: 4,
                    hidden_layers: 1,
                    alpha: 2.5,
                },
                1,
            )
            .unwrap(),
            extractor: Some(ExtractorSetup {
                extractor: toy_extractor(4),
                scales: MultiScaleConfig {
                    scales: vec![64, 32],
                    multi_scale: true,
                },
            }),
            metadata: Metadata::new(),
        };
        let file = saved.to_tensor_file().unwrap();
        assert_eq!(file.metadata.get("source"), Some("images"));
        let loaded = SavedModel::from_tensor_file(&TensorFile::decode(&file.encode().unwrap()).unwrap()).unwrap();
        assert_eq!(loaded, saved);

        let standalone = extractor_to_file(saved.extractor.as_ref().unwrap()).unwrap();
        assert_eq!(
            &extractor_from_file(&standalone).unwrap(),
            saved.extractor.as_ref().unwrap()
        );
    }

    #[test]
    fn wrong_parameter_shape_rejected() {
        let mut file = SavedModel {
            flow: small_flow(),
            extractor: None,
            metadata: Metadata::new(),
        }
        .to_tensor_file()
        .unwrap();
        file.tensors[0].1 = Tensor::zeros([3, 6]);
        assert!(matches!(SavedModel::from_tensor_file(&file), Err(Error::Shape(_))));
    }

    fn record(id: &str, t: u32, features: Vec<f32>) -> FeatureRecord {
        FeatureRecord {
            sample_id: id.into(),
            label: -1,
            transform_id: t,
            features,
        }
    }

    #[test]
    fn feature_file_checks() {
        assert!(FeatureFile::new(2, vec![record("a", 0, vec![1.0])]).is_err());
        assert!(FeatureFile::new(1, vec![record("a", 0, vec![1.0]), record("a", 0, vec![2.0])]).is_err());
        assert!(FeatureFile::new(1, vec![record("a", 0, vec![1.0]), record("a", 1, vec![2.0])]).is_ok());
    }

    #[test]
    fn short_record_names_its_index() {
        let f = FeatureFile::new(3, vec![record("a", 0, vec![1.0; 3]), record("b", 0, vec![2.0; 3])]).unwrap();
        let bytes = f.encode().unwrap();
        match FeatureFile::decode(&bytes[..bytes.len() - 4]) {
            Err(Error::Truncated(msg)) => assert!(msg.contains("record 1"), "{msg}"),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn feature_header_of_full_dimension() {
        let f = FeatureFile::new(768, vec![record("x", 3, vec![0.5; 768])]).unwrap();
        let back = FeatureFile::decode(&f.encode().unwrap()).unwrap();
        assert_eq!(back.dim, 768);
        assert_eq!(back.matrix().shape(), &[1, 768]);
    }
}
