//! Real-NVP style normalizing flow with soft-clamped affine couplings.
//!
//! Each [`CouplingBlock`] permutes its input, splits it into halves
//! `(a, b)` and applies
//!
//! ```text
//! b' = b * exp(c(s1(a)))  + t1(a)
//! a' = a * exp(c(s2(b'))) + t2(b')
//! ```
//!
//! where `c(h) = 2α/π · atan(h/α)` is the soft clamp and each subnet emits
//! `[s | t]` in one output vector. The block output is `[a' | b']` and its
//! log-determinant is the sum of all clamped `s` values.

use std::f64::consts::PI;

use rand::Rng as _;

use crate::autodiff::{self, kernels, Bindings, Graph, GraphBuilder, NodeId, Real, Reduce, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 3.0;
pub const DEFAULT_BLOCKS: usize = 8;
pub const DEFAULT_HIDDEN_WIDTH: usize = 2048;
pub const DEFAULT_HIDDEN_LAYERS: usize = 3;
pub const DEFAULT_DIM: usize = 768;

/// `(2α/π)·atan(h/α)`, elementwise.
pub fn soft_clamp<T: Real>(h: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    check_alpha(alpha)?;
    let (inv, gain) = (T::lit(1.0 / alpha), T::lit(2.0 * alpha / PI));
    Ok(h.map(|v| (v * inv).atan() * gain))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "clamp alpha must be positive, got {alpha}"
        )))
    }
}

/// Fully connected layer `x -> x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros([inputs, outputs]),
            bias: Tensor::zeros([outputs]),
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform(inputs: usize, outputs: usize, rng: &mut crate::Rng) -> Self {
        let limit = (6.0 / inputs as f64).sqrt() as f32;
        Self {
            weight: Tensor::from_fn([inputs, outputs], |_| rng.random_range(-limit..=limit)),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Dense network with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Subnet {
    pub layers: Vec<Dense>,
}

impl Subnet {
    /// Hidden layers He-uniform, output layer zero (the block starts as a pure permutation).
    pub fn init(inputs: usize, outputs: usize, width: usize, hidden: usize, rng: &mut crate::Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden + 1);
        let mut fan_in = inputs;
        for _ in 0..hidden {
            layers.push(Dense::he_uniform(fan_in, width, rng));
            fan_in = width;
        }
        layers.push(Dense::zeros(fan_in, outputs));
        Self { layers }
    }

    /// Batched numeric forward of `x: [B, in]`.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let rows = x.len() / x.last_dim().max(1);
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = T::from_f32_tensor(&layer.weight);
            let b = T::from_f32_tensor(&layer.bias);
            h = kernels::matmul(&h, w.data(), rows, layer.inputs(), layer.outputs());
            kernels::add_rows(&mut h, b.data());
            if i != last {
                h.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
        }
        let out = self.layers[last].outputs();
        Tensor::new([rows, out], h).expect("subnet output shape")
    }

    fn param_names(prefix: &str, layers: usize) -> Vec<(String, String)> {
        (0..layers)
            .map(|k| (format!("{prefix}.layer{k}.weight"), format!("{prefix}.layer{k}.bias")))
            .collect()
    }

    fn build(&self, b: &mut GraphBuilder, input: NodeId, prefix: &str) -> NodeId {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (k, (layer, (wn, bn))) in self
            .layers
            .iter()
            .zip(Self::param_names(prefix, self.layers.len()))
            .enumerate()
        {
            let w = b.leaf(wn, layer.weight.shape());
            let bias = b.leaf(bn, layer.bias.shape());
            let mm = b.matmul(h, w);
            h = b.add(mm, bias);
            if k != last {
                h = b.relu(h);
            }
        }
        h
    }
}

/// One coupling block: fixed permutation followed by two affine couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    pub permutation: Vec<usize>,
    /// `subnets[0]` regresses `(s1, t1)` from the first half,
    /// `subnets[1]` regresses `(s2, t2)` from the updated second half.
    pub subnets: [Subnet; 2],
}

impl CouplingBlock {
    pub fn dim(&self) -> usize {
        self.permutation.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "coupling dimension must be even and positive, got {d}"
            )));
        }
        if !autodiff::is_permutation(&self.permutation) {
            return Err(Error::InvalidArgument("block permutation is not a bijection".into()));
        }
        for sub in &self.subnets {
            let (first, last) = (&sub.layers[0], &sub.layers[sub.layers.len() - 1]);
            if first.inputs() != d / 2 || last.outputs() != d {
                return Err(Error::Shape(format!(
                    "subnet maps {} -> {}, expected {} -> {d}",
                    first.inputs(),
                    last.outputs(),
                    d / 2
                )));
            }
        }
        Ok(())
    }

    fn build(&self, b: &mut GraphBuilder, input: NodeId, prefix: &str, alpha: f64) -> Result<(NodeId, NodeId)> {
        let d = self.dim();
        let half = d / 2;
        let permuted = b.permute(input, &self.permutation)?;
        let (a, bh) = b.split(permuted, half, d);

        let st1 = self.subnets[0].build(b, a, &format!("{prefix}.subnet0"));
        let (s1, t1) = b.split(st1, half, d);
        let s1 = clamp_node(b, s1, alpha);
        let e1 = b.exp(s1);
        let scaled = b.mul(bh, e1);
        let b_out = b.add(scaled, t1);

        let st2 = self.subnets[1].build(b, b_out, &format!("{prefix}.subnet1"));
        let (s2, t2) = b.split(st2, half, d);
        let s2 = clamp_node(b, s2, alpha);
        let e2 = b.exp(s2);
        let scaled = b.mul(a, e2);
        let a_out = b.add(scaled, t2);

        let out = b.concat(&[a_out, b_out]);
        let l1 = b.sum(s1, Reduce::LastAxis);
        let l2 = b.sum(s2, Reduce::LastAxis);
        let logdet = b.add(l1, l2);
        Ok((out, logdet))
    }

    /// Exact inverse of the block on `[B, D]`.
    pub fn inverse<T: Real>(&self, y: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
        self.validate()?;
        check_alpha(alpha)?;
        let d = self.dim();
        let half = d / 2;
        if y.last_dim() != d || y.rank() != 2 {
            return Err(Error::Shape(format!(
                "coupling inverse expects [B, {d}], got {:?}",
                y.shape()
            )));
        }
        let rows = y.shape()[0];
        let take = |t: &Tensor<T>, start: usize| {
            let mut v = Vec::with_capacity(rows * half);
            for r in 0..rows {
                v.extend_from_slice(&t.row(r)[start..start + half]);
            }
            Tensor::new([rows, half], v).expect("half shape")
        };
        let a_out = take(y, 0);
        let b_out = take(y, half);

        let undo = |out: &Tensor<T>, cond: &Tensor<T>, subnet: &Subnet| -> Result<Tensor<T>> {
            let st = subnet.apply(cond);
            let s = soft_clamp(&take(&st, 0), alpha)?;
            let t = take(&st, half);
            let data = out
                .data()
                .iter()
                .zip(s.data())
                .zip(t.data())
                .map(|((&o, &s), &t)| (o - t) * (-s).exp())
                .collect();
            Tensor::new([rows, half], data)
        };
        let a = undo(&a_out, &b_out, &self.subnets[1])?;
        let bh = undo(&b_out, &a, &self.subnets[0])?;

        let mut x = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &mut x[r * d..(r + 1) * d];
            for (j, &p) in self.permutation.iter().enumerate() {
                row[p] = if j < half { a.row(r)[j] } else { bh.row(r)[j - half] };
            }
        }
        Tensor::new([rows, d], x)
    }
}

fn clamp_node(b: &mut GraphBuilder, h: NodeId, alpha: f64) -> NodeId {
    let scaled = b.scale(h, 1.0 / alpha);
    let at = b.arctan(scaled);
    b.scale(at, 2.0 * alpha / PI)
}

/// Fisher–Yates shuffle of `0..n`.
pub fn random_permutation(n: usize, rng: &mut crate::Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Architecture hyperparameters of a [`FlowModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub dim: usize,
    pub blocks: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub alpha: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            blocks: DEFAULT_BLOCKS,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            hidden_layers: DEFAULT_HIDDEN_LAYERS,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "flow dimension must be even and positive, got {}",
                self.dim
            )));
        }
        if self.blocks == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidArgument(
                "flow needs at least one block and a positive hidden width".into(),
            ));
        }
        Ok(())
    }
}

/// Output nodes of a flow recorded into a graph.
#[derive(Debug, Clone, Copy)]
pub struct FlowNodes {
    /// `[B, D]` latent codes.
    pub z: NodeId,
    /// `[B]` log-determinants.
    pub logdet: NodeId,
    /// `[B]` per-sample negative log-likelihood `|z|²/2 - logdet`.
    pub nll: NodeId,
    /// Scalar sum of `nll` over the batch.
    pub nll_sum: NodeId,
}

/// Bijective map from feature space to latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub config: FlowConfig,
    /// Seed of the permutations and initial weights.
    pub seed: u64,
    pub blocks: Vec<CouplingBlock>,
}

impl FlowModel {
    /// Identity-initialised model: every block is a pure permutation.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng(seed);
        let half = config.dim / 2;
        let blocks = (0..config.blocks)
            .map(|_| {
                let permutation = random_permutation(config.dim, &mut rng);
                let mut sub = || Subnet::init(half, config.dim, config.hidden_width, config.hidden_layers, &mut rng);
                let subnets = [sub(), sub()];
                CouplingBlock { permutation, subnets }
            })
            .collect();
        Ok(Self { config, seed, blocks })
    }

    /// Fills every output layer with uniform noise in `[-scale, scale]`,
    /// producing a non-trivial random flow.
    pub fn randomize_output_layers(&mut self, seed: u64, scale: f32) {
        let mut rng = crate::rng(seed);
        for block in &mut self.blocks {
            for sub in &mut block.subnets {
                let last = sub.layers.last_mut().expect("non-empty subnet");
                for v in last.weight.data_mut().iter_mut().chain(last.bias.data_mut()) {
                    *v = rng.random_range(-scale..=scale);
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.blocks {
            return Err(Error::InvalidArgument(format!(
                "model declares {} blocks but holds {}",
                self.config.blocks,
                self.blocks.len()
            )));
        }
        for block in &self.blocks {
            if block.dim() != self.config.dim {
                return Err(Error::Shape(format!(
                    "block of dimension {} in a flow of dimension {}",
                    block.dim(),
                    self.config.dim
                )));
            }
            block.validate()?;
        }
        Ok(())
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            for (j, sub) in block.subnets.iter().enumerate() {
                let names = Subnet::param_names(&format!("flow.block{i}.subnet{j}"), sub.layers.len());
                for (layer, (wn, bn)) in sub.layers.iter().zip(names) {
                    out.push((wn, &layer.weight));
                    out.push((bn, &layer.bias));
                }
            }
        }
        out
    }

    /// Mutable parameters in the same order as [`FlowModel::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for sub in &mut block.subnets {
                for layer in &mut sub.layers {
                    out.push(&mut layer.weight);
                    out.push(&mut layer.bias);
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records the flow applied to `input: [B, D]` into `b`.
    pub fn build(&self, b: &mut GraphBuilder, input: NodeId) -> Result<FlowNodes> {
        self.validate()?;
        let mut h = input;
        let mut logdet: Option<NodeId> = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, ld) = block.build(b, h, &format!("flow.block{i}"), self.config.alpha)?;
            h = out;
            logdet = Some(match logdet {
                Some(acc) => b.add(acc, ld),
                None => ld,
            });
        }
        let logdet = logdet.expect("at least one block");
        let sq = b.squared_norm(h, Reduce::LastAxis);
        let half_sq = b.scale(sq, 0.5);
        let neg_ld = b.neg(logdet);
        let nll = b.add(half_sq, neg_ld);
        let nll_sum = b.sum(nll, Reduce::All);
        Ok(FlowNodes {
            z: h,
            logdet,
            nll,
            nll_sum,
        })
    }

    /// Binds every parameter of this model (converted to `T`).
    pub fn bind<'a, T: Real>(&'a self, bindings: &mut Bindings<'a, T>) {
        for (name, t) in self.parameters() {
            bindings.bind_cow(name, T::from_f32_tensor(t));
        }
    }

    /// `z` and per-sample log-determinants for `y: [B, D]` or `[D]`.
    pub fn forward<T: Real>(&self, y: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        FlowGraph::new(self)?.forward(self, y)
    }

    /// Inverse map for `z: [B, D]` or `[D]`; blocks are undone in reverse order.
    pub fn inverse<T: Real>(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        let (batched, single) = as_batch(z, self.dim())?;
        let mut y = batched;
        for block in self.blocks.iter().rev() {
            y = block.inverse(&y, self.config.alpha)?;
        }
        if single {
            y = y.reshape([self.dim()])?;
        }
        Ok(y)
    }

    /// Per-sample negative log-likelihood of `y: [B, D]`.
    pub fn nll<T: Real>(&self, y: &Tensor<T>) -> Result<Vec<T>> {
        FlowGraph::new(self)?.nll(self, y)
    }
}

fn as_batch<T: Real>(y: &Tensor<T>, dim: usize) -> Result<(Tensor<T>, bool)> {
    match y.shape() {
        &[d] if d == dim => Ok((y.clone().reshape([1, d])?, true)),
        &[_, d] if d == dim => Ok((y.clone(), false)),
        s => Err(Error::Shape(format!("expected [B, {dim}] or [{dim}], got {s:?}"))),
    }
}

/// A flow recorded once into a graph, reusable across batches.
#[derive(Debug)]
pub struct FlowGraph {
    graph: Graph,
    input: NodeId,
    nodes: FlowNodes,
    dim: usize,
}

impl FlowGraph {
    pub const INPUT: &'static str = "flow.input";

    pub fn new(model: &FlowModel) -> Result<Self> {
        let mut b = GraphBuilder::new();
        let input = b.leaf_pattern(Self::INPUT, &[None, Some(model.dim())]);
        let nodes = model.build(&mut b, input)?;
        b.output("z", nodes.z);
        b.output("logdet", nodes.logdet);
        b.output("nll", nodes.nll);
        Ok(Self {
            graph: b.build(),
            input,
            nodes,
            dim: model.dim(),
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn nodes(&self) -> FlowNodes {
        self.nodes
    }

    /// Evaluates the graph on a `[B, D]` batch with `model`'s parameters.
    pub fn run<'a, T: Real>(&'a self, model: &'a FlowModel, y: &'a Tensor<T>) -> Result<autodiff::Execution<'a, T>> {
        let mut bindings = Bindings::new();
        model.bind(&mut bindings);
        bindings.bind(Self::INPUT, y);
        self.graph.evaluate(bindings)
    }

    pub fn forward<T: Real>(&self, model: &FlowModel, y: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let (batch, single) = as_batch(y, self.dim)?;
        let exec = self.run(model, &batch)?;
        let mut z = exec.value(self.nodes.z).clone();
        if single {
            z = z.reshape([self.dim])?;
        }
        Ok((z, exec.value(self.nodes.logdet).data().to_vec()))
    }

    pub fn nll<T: Real>(&self, model: &FlowModel, y: &Tensor<T>) -> Result<Vec<T>> {
        let (batch, _) = as_batch(y, self.dim)?;
        let exec = self.run(model, &batch)?;
        Ok(exec.value(self.nodes.nll).data().to_vec())
    }
}

/// Forward pass of a single block with clamp `alpha`.
pub fn coupling_forward<T: Real>(block: &CouplingBlock, alpha: f64, y: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    single_block_model(block, alpha)?.forward(y)
}

/// Inverse of a single block for `[B, D]` or `[D]` inputs.
pub fn coupling_inverse<T: Real>(block: &CouplingBlock, alpha: f64, y: &Tensor<T>) -> Result<Tensor<T>> {
    single_block_model(block, alpha)?.inverse(y)
}

fn single_block_model(block: &CouplingBlock, alpha: f64) -> Result<FlowModel> {
    let hidden = block.subnets[0].layers.len() - 1;
    let width = block.subnets[0].layers[0].outputs();
    let model = FlowModel {
        config: FlowConfig {
            dim: block.dim(),
            blocks: 1,
            hidden_width: width,
            hidden_layers: hidden,
            alpha,
        },
        seed: 0,
        blocks: vec![block.clone()],
    };
    model.validate()?;
    Ok(model)
}
