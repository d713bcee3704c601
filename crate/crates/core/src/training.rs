//! Maximum-likelihood training of a [`FlowModel`] with Adam.

use rand::Rng as _;

use crate::autodiff::{NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::extractor::FeaturePipeline;
use crate::flow::{FlowConfig, FlowGraph, FlowModel, DEFAULT_HIDDEN_LAYERS};
use crate::imageops::{random_transform, Image, TransformConfig};
use crate::{derive_seed, seeds};

/// Batch loss above which training is aborted.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// `|z|²/2 - logdet`; the constant `D/2 · log 2π` is omitted.
pub fn nll<T: Real>(z: &[T], logdet: T) -> Result<T> {
    if !logdet.is_finite() || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("nll of a non-finite input".into()));
    }
    let sq: T = z.iter().map(|&v| v * v).sum();
    Ok(sq * T::lit(0.5) - logdet)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let first: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[&Tensor<f32>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::Shape(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let g = g as f64;
            let mn = b1 * *m as f64 + (1.0 - b1) * g;
            let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = config.learning_rate * (mn / c1) / ((vn / c2).sqrt() + config.eps);
            *p = (*p as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub blocks: usize,
    pub clamp_alpha: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub seed: u64,
    /// Share of samples held out for reporting a validation NLL.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 192,
            batch_size: 96,
            adam: AdamConfig::default(),
            blocks: 8,
            clamp_alpha: 3.0,
            hidden_width: 2048,
            hidden_layers: DEFAULT_HIDDEN_LAYERS,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn flow_config(&self, dim: usize) -> FlowConfig {
        FlowConfig {
            dim,
            blocks: self.blocks,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            alpha: self.clamp_alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let positive = self.batch_size > 0
            && self.blocks > 0
            && self.hidden_width > 0
            && a.learning_rate > 0.0
            && a.eps > 0.0
            && self.clamp_alpha > 0.0;
        if !positive {
            return Err(Error::InvalidArgument(
                "batch size, blocks, width, learning rate, eps and alpha must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Source of training features, queried once per epoch.
pub trait TrainingData {
    fn dim(&self) -> usize;

    /// `[N, D]` features for `epoch` (0-based). Sources that augment
    /// on the fly draw fresh transforms here.
    fn epoch_features(&mut self, epoch: usize) -> Result<Tensor<f32>>;
}

/// Precomputed features, identical every epoch.
#[derive(Debug, Clone)]
pub struct FixedFeatures(pub Tensor<f32>);

impl TrainingData for FixedFeatures {
    fn dim(&self) -> usize {
        self.0.last_dim()
    }

    fn epoch_features(&mut self, _epoch: usize) -> Result<Tensor<f32>> {
        Ok(self.0.clone())
    }
}

/// Training images passed through the extractor, with transforms redrawn
/// every epoch.
pub struct AugmentedImages<'p> {
    images: Vec<Image>,
    pipeline: &'p FeaturePipeline,
    transforms: Option<TransformConfig>,
    per_image: usize,
    seed: u64,
    fixed: Option<Tensor<f32>>,
}

impl<'p> AugmentedImages<'p> {
    /// `transforms: None` trains on the untouched images. Otherwise every
    /// image yields `per_image` random views per epoch.
    pub fn new(
        images: Vec<Image>,
        pipeline: &'p FeaturePipeline,
        transforms: Option<TransformConfig>,
        per_image: usize,
        seed: u64,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if per_image == 0 {
            return Err(Error::InvalidArgument("need at least one view per image".into()));
        }
        Ok(Self {
            images,
            pipeline,
            transforms,
            per_image,
            seed: derive_seed(seed, seeds::TRAIN_TRANSFORMS),
            fixed: None,
        })
    }

    /// Features of the untouched images, `[N, D]`.
    pub fn identity_features(&mut self) -> Result<Tensor<f32>> {
        if self.fixed.is_none() {
            self.fixed = Some(self.pipeline.extract_batch(&self.images)?);
        }
        Ok(self.fixed.clone().expect("just filled"))
    }
}

impl TrainingData for AugmentedImages<'_> {
    fn dim(&self) -> usize {
        self.pipeline.feature_dim()
    }

    fn epoch_features(&mut self, epoch: usize) -> Result<Tensor<f32>> {
        let Some(config) = self.transforms else {
            return self.identity_features();
        };
        let mut rng = crate::rng(derive_seed(self.seed, epoch as u64));
        let views = self
            .images
            .iter()
            .flat_map(|img| (0..self.per_image).map(move |_| img))
            .map(|img| random_transform(&mut rng, &config).apply(img))
            .collect::<Result<Vec<_>>>()?;
        self.pipeline.extract_batch(&views)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean NLL over the epoch's training batches.
    pub mean_nll: f64,
    pub validation_nll: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    /// Loss log, one `epoch,mean_nll` line per epoch.
    pub fn loss_log(&self) -> String {
        self.history
            .iter()
            .map(|s| format!("{},{}\n", s.epoch, s.mean_nll))
            .collect()
    }
}

/// Mean NLL of `features` under `model`, in batches of `batch`.
pub fn mean_nll(model: &FlowModel, features: &Tensor<f32>, batch: usize) -> Result<f64> {
    let graph = FlowGraph::new(model)?;
    mean_nll_with(&graph, model, features, batch)
}

fn mean_nll_with(graph: &FlowGraph, model: &FlowModel, features: &Tensor<f32>, batch: usize) -> Result<f64> {
    let rows = rows_of(features)?;
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..rows).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let b = gather(features, chunk);
        total += graph.nll(model, &b)?.iter().map(|&v| v as f64).sum::<f64>();
    }
    Ok(total / rows as f64)
}

fn rows_of(t: &Tensor<f32>) -> Result<usize> {
    match t.shape() {
        &[n, _] => Ok(n),
        s => Err(Error::Shape(format!("features must be [N, D], got {s:?}"))),
    }
}

fn gather(features: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let d = features.last_dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(features.row(r));
    }
    Tensor::new([rows.len(), d], data).expect("gathered batch")
}

/// Fisher–Yates order of `0..n`.
fn shuffled(n: usize, rng: &mut crate::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

/// Seeded (train, validation) partition of `0..n`. The validation part
/// holds `floor(n * fraction)` indices and is empty when that is 0 or `n`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let held = (n as f64 * fraction).floor() as usize;
    if held == 0 || held == n {
        return ((0..n).collect(), Vec::new());
    }
    let mut rng = crate::rng(derive_seed(seed, seeds::SPLIT));
    let mut order = shuffled(n, &mut rng);
    let train = order.split_off(held);
    (train, order)
}

/// Splits `[N, D]` rows into (train, validation) with a seeded shuffle.
pub fn split_validation(
    features: &Tensor<f32>,
    fraction: f64,
    seed: u64,
) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let n = rows_of(features)?;
    let (train, val) = split_indices(n, fraction, seed);
    if val.is_empty() {
        return Ok((features.clone(), None));
    }
    Ok((gather(features, &train), Some(gather(features, &val))))
}

/// Trains precomputed features, holding out `config.validation_fraction`.
pub fn train_features(features: &Tensor<f32>, config: &TrainConfig) -> Result<TrainOutcome> {
    let (train_set, validation) = split_validation(features, config.validation_fraction, config.seed)?;
    train(&mut FixedFeatures(train_set), config, validation.as_ref())
}

/// Trains a fresh identity-initialised flow on `data`.
pub fn train(
    data: &mut dyn TrainingData,
    config: &TrainConfig,
    validation: Option<&Tensor<f32>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let dim = data.dim();
    let mut model = FlowModel::new(config.flow_config(dim), derive_seed(config.seed, seeds::FLOW_INIT))?;
    let graph = FlowGraph::new(&model)?;
    let param_nodes: Vec<NodeId> = model
        .parameters()
        .iter()
        .map(|(name, _)| graph.graph().leaf(name).expect("parameter leaf"))
        .collect();
    let mut adam = AdamState::new(model.parameters().into_iter().map(|(_, t)| t));
    let mut shuffle_rng = crate::rng(derive_seed(config.seed, seeds::SHUFFLE));
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let features = data.epoch_features(epoch)?;
        let rows = rows_of(&features)?;
        if rows == 0 {
            return Err(Error::EmptyDataset);
        }
        if features.last_dim() != dim {
            return Err(Error::Shape(format!(
                "epoch {epoch} features have dimension {}, expected {dim}",
                features.last_dim()
            )));
        }
        let order = shuffled(rows, &mut shuffle_rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = gather(&features, chunk);
            let diverged = |loss: f64| Error::Divergence {
                epoch: epoch + 1,
                batch: bi,
                loss,
            };
            let grads = {
                let exec = match graph.run(&model, &batch) {
                    Ok(exec) => exec,
                    Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                    Err(e) => return Err(e),
                };
                let loss_sum = exec.value(graph.nodes().nll_sum).data()[0] as f64;
                let mean = loss_sum / chunk.len() as f64;
                if !mean.is_finite() || mean > DIVERGENCE_LIMIT {
                    return Err(diverged(mean));
                }
                total += loss_sum;
                let seed = Tensor::scalar(1.0 / chunk.len() as f32);
                let mut g = exec.backward_wrt(graph.nodes().nll_sum, &seed, &param_nodes)?;
                param_nodes.iter().map(|&id| g_take(&mut g, id)).collect::<Vec<_>>()
            };
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(diverged(f64::NAN));
            }
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            adam_step(&mut model.parameters_mut(), &grad_refs, &mut adam, &config.adam)?;
        }
        let validation_nll = validation
            .map(|v| mean_nll_with(&graph, &model, v, config.batch_size))
            .transpose()?;
        history.push(EpochStats {
            epoch: epoch + 1,
            mean_nll: total / rows as f64,
            validation_nll,
        });
    }
    Ok(TrainOutcome { model, history })
}

fn g_take(g: &mut crate::autodiff::Gradients<f32>, id: NodeId) -> Tensor<f32> {
    g.node(id).cloned().expect("requested gradient")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_examples() {
        assert_eq!(nll(&[0.0f64, 0.0], 0.0).unwrap(), 0.0);
        assert_eq!(nll(&[1.0f64, 1.0], 0.0).unwrap(), 1.0);
        assert_eq!(nll(&[0.0f64], 2.0).unwrap(), -2.0);
        assert!(nll(&[f64::NAN], 0.0).is_err());
        assert!(nll(&[0.0f64], f64::INFINITY).is_err());
    }

    fn scalar_step(p: &mut Tensor<f32>, g: f32, state: &mut AdamState, cfg: &AdamConfig) {
        let g = Tensor::vector(vec![g]);
        adam_step(&mut [p], &[&g], state, cfg).unwrap();
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        let mut p = Tensor::vector(vec![0.5f32]);
        let mut state = AdamState::new([&p]);
        scalar_step(&mut p, 1.0, &mut state, &cfg);
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] as f64 - expected).abs() < 1e-7);
        scalar_step(&mut p, 1.0, &mut state, &cfg);
        assert!((0.5 - p.data()[0] as f64 - 2e-3).abs() < 1e-6);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::vector(vec![1.25f32]);
        let mut state = AdamState::new([&p]);
        scalar_step(&mut p, 1.0, &mut state, &cfg);
        let after_one = p.clone();
        let (m1, v1) = (state.first[0].data()[0], state.second[0].data()[0]);
        scalar_step(&mut p, 0.0, &mut state, &cfg);
        // the update uses the decayed first moment, which is still non-zero
        assert!(p.data()[0] < after_one.data()[0]);
        assert!(state.first[0].data()[0].abs() < m1.abs());
        assert!(state.second[0].data()[0] < v1);

        let mut q = Tensor::vector(vec![1.25f32]);
        let mut fresh = AdamState::new([&q]);
        scalar_step(&mut q, 0.0, &mut fresh, &cfg);
        assert_eq!(q.data()[0], 1.25);
        assert_eq!(fresh.first[0].data()[0], 0.0);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Tensor::vector(vec![0.0f32; 2]);
        let mut state = AdamState::new([&p]);
        let g = Tensor::vector(vec![0.0f32; 3]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).is_err());
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            blocks: 2,
            hidden_width: 16,
            seed: 7,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        }
    }

    fn skewed_data(n: usize) -> Tensor<f32> {
        let mut rng = crate::rng(99);
        Tensor::from_fn([n, 4], |i| {
            let u: f32 = rng.random_range(-1.0..1.0);
            if i % 4 == 0 {
                2.0 + 0.3 * u
            } else {
                u * u * 3.0
            }
        })
    }

    #[test]
    fn zero_epochs_gives_identity_model() {
        let data = skewed_data(40);
        let out = train_features(&data, &tiny_config(0)).unwrap();
        let fresh = FlowModel::new(out.model.config, derive_seed(7, seeds::FLOW_INIT)).unwrap();
        assert_eq!(out.model, fresh);
        assert!(out.history.is_empty());
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let data = skewed_data(64);
        let a = train_features(&data, &tiny_config(11)).unwrap();
        let b = train_features(&data, &tiny_config(11)).unwrap();
        assert!(a.history[10].mean_nll < a.history[0].mean_nll);
        assert_eq!(a.loss_log(), b.loss_log());
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_log().lines().count(), 11);
        assert!(a.loss_log().starts_with("1,"));
    }

    #[test]
    fn empty_and_mismatched_data_rejected() {
        let empty = Tensor::<f32>::zeros([0, 4]);
        assert!(matches!(
            train_features(&empty, &tiny_config(1)),
            Err(Error::EmptyDataset)
        ));
        let odd = Tensor::<f32>::zeros([5, 3]);
        assert!(train_features(&odd, &tiny_config(1)).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = tiny_config(3);
        cfg.adam.learning_rate = 1e3;
        let data = Tensor::from_fn([32, 4], |i| 1e3 * (i as f32).sin());
        assert!(matches!(train_features(&data, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn validation_split_holds_out_rows() {
        let data = skewed_data(50);
        let (train, val) = split_validation(&data, 0.1, 3).unwrap();
        assert_eq!(train.shape(), &[45, 4]);
        assert_eq!(val.unwrap().shape(), &[5, 4]);
        let (all, none) = split_validation(&data, 0.0, 3).unwrap();
        assert_eq!(all, data);
        assert!(none.is_none());
    }
}
