use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction extent for `sum` and `squared_norm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// Reduce every element to a scalar.
    All,
    /// Reduce the last axis, keeping the leading ones.
    LastAxis,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        name: String,
        shape: Vec<Option<usize>>,
    },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Exp(NodeId),
    Arctan(NodeId),
    Relu(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId, Reduce),
    SquaredNorm(NodeId, Reduce),
    Permute(NodeId, Vec<usize>),
    Slice {
        input: NodeId,
        start: usize,
        len: usize,
    },
    Concat(Vec<NodeId>),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: NodeId,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool(NodeId),
    Resize {
        input: NodeId,
        height: usize,
        width: usize,
    },
    ChannelAffine {
        input: NodeId,
        scale: Vec<f64>,
        shift: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Exp(_) => "exp",
            Op::Arctan(_) => "arctan",
            Op::Relu(_) => "relu",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::SquaredNorm(..) => "squared_norm",
            Op::Permute(..) => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Resize { .. } => "resize",
            Op::ChannelAffine { .. } => "channel_affine",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Exp(a)
            | Op::Arctan(a)
            | Op::Relu(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Sum(a, _)
            | Op::SquaredNorm(a, _)
            | Op::Permute(a, _)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Slice { input, .. }
            | Op::MaxPool2d { input, .. }
            | Op::Resize { input, .. }
            | Op::ChannelAffine { input, .. } => vec![*input],
            Op::Concat(xs) => xs.clone(),
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
        }
    }
}

/// Records primitive operations in topological order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Op>,
    outputs: Vec<(String, NodeId)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// Named leaf with a fixed shape.
    pub fn leaf(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        let pattern: Vec<Option<usize>> = shape.iter().copied().map(Some).collect();
        self.leaf_pattern(name, &pattern)
    }

    /// Named leaf whose `None` dimensions accept any size (e.g. a batch axis).
    ///
    /// Declaring a name twice returns the first node, so one parameter can
    /// feed several branches and its gradients accumulate.
    ///
    /// # Panics
    /// If the name was already declared with a different shape.
    pub fn leaf_pattern(&mut self, name: impl Into<String>, shape: &[Option<usize>]) -> NodeId {
        let name = name.into();
        for (i, op) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: n, shape: s } = op {
                if *n == name {
                    assert_eq!(s, shape, "leaf `{name}` redeclared with another shape");
                    return NodeId(i);
                }
            }
        }
        self.push(Op::Leaf {
            name,
            shape: shape.to_vec(),
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Elementwise sum; `b` may also be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn arctan(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Arctan(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId, reduce: Reduce) -> NodeId {
        self.push(Op::Sum(a, reduce))
    }

    pub fn squared_norm(&mut self, a: NodeId, reduce: Reduce) -> NodeId {
        self.push(Op::SquaredNorm(a, reduce))
    }

    /// `out[.., j] = a[.., perm[j]]` along the last axis.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        if !is_permutation(perm) {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
        }
        Ok(self.push(Op::Permute(a, perm.to_vec())))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice { input: a, start, len })
    }

    /// Splits the last axis at `at`.
    pub fn split(&mut self, a: NodeId, at: usize, total: usize) -> (NodeId, NodeId) {
        (self.slice(a, 0, at), self.slice(a, at, total - at))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        self.push(Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn max_pool2d(&mut self, input: NodeId, kernel: usize, stride: usize) -> NodeId {
        self.push(Op::MaxPool2d { input, kernel, stride })
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool(input))
    }

    /// Bilinear resampling of the two spatial axes.
    pub fn resize(&mut self, input: NodeId, height: usize, width: usize) -> NodeId {
        self.push(Op::Resize { input, height, width })
    }

    /// `out[n, c] = in[n, c] * scale[c] + shift[c]` over NCHW.
    pub fn channel_affine(&mut self, input: NodeId, scale: Vec<f64>, shift: Vec<f64>) -> NodeId {
        self.push(Op::ChannelAffine { input, scale, shift })
    }

    pub fn output(&mut self, name: impl Into<String>, node: NodeId) {
        self.outputs.push((name.into(), node));
    }

    pub fn build(self) -> Graph {
        let mut leaves = HashMap::new();
        for (i, op) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name, .. } = op {
                leaves.insert(name.clone(), NodeId(i));
            }
        }
        Graph {
            nodes: self.nodes,
            leaves,
            outputs: self.outputs,
        }
    }
}

pub(crate) fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter()
        .all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true))
}

/// Immutable computation graph; evaluate it any number of times.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Op>,
    leaves: HashMap<String, NodeId>,
    outputs: Vec<(String, NodeId)>,
}

/// Named leaf values for one evaluation.
#[derive(Debug, Default)]
pub struct Bindings<'a, T: Real> {
    values: HashMap<String, Cow<'a, Tensor<T>>>,
}

impl<'a, T: Real> Bindings<'a, T> {
    pub fn new() -> Self {
        Self { values: HashMap::new() }
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor<T>) -> &mut Self {
        self.values.insert(name.into(), Cow::Borrowed(value));
        self
    }

    pub fn bind_owned(&mut self, name: impl Into<String>, value: Tensor<T>) -> &mut Self {
        self.values.insert(name.into(), Cow::Owned(value));
        self
    }

    pub fn bind_cow(&mut self, name: impl Into<String>, value: Cow<'a, Tensor<T>>) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }
}

impl Graph {
    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Runs every node forward.
    pub fn evaluate<'a, T: Real>(&'a self, inputs: Bindings<'a, T>) -> Result<Execution<'a, T>> {
        let mut inputs = inputs.values;
        if let Some(unknown) = inputs.keys().find(|k| !self.leaves.contains_key(*k)) {
            return Err(Error::UnknownInput(unknown.clone()));
        }
        let mut values: Vec<Cow<'a, Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        let mut pool_args: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, op) in self.nodes.iter().enumerate() {
            let value = match op {
                Op::Leaf { name, shape } => {
                    let v = inputs.remove(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
                    if !matches_pattern(v.shape(), shape) {
                        return Err(Error::Shape(format!(
                            "input `{name}` has shape {:?}, expected {shape:?}",
                            v.shape()
                        )));
                    }
                    v
                }
                _ => {
                    let get = |id: NodeId| values[id.0].as_ref();
                    let (out, args) = forward_op(op, get).map_err(|e| annotate(e, i, op.name()))?;
                    if let Some(args) = args {
                        pool_args.insert(i, args);
                    }
                    Cow::Owned(out)
                }
            };
            if cfg!(debug_assertions) && !value.all_finite() {
                return Err(Error::NonFinite { op: op.name(), node: i });
            }
            values.push(value);
        }
        Ok(Execution {
            graph: self,
            values,
            pool_args,
        })
    }
}

fn annotate(e: Error, node: usize, op: &str) -> Error {
    match e {
        Error::Shape(msg) => Error::Shape(format!("{op} (node {node}): {msg}")),
        other => other,
    }
}

fn matches_pattern(shape: &[usize], pattern: &[Option<usize>]) -> bool {
    shape.len() == pattern.len() && shape.iter().zip(pattern).all(|(&d, p)| p.is_none_or(|p| p == d))
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn rank4(t: &[usize]) -> Result<[usize; 4]> {
    match t {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => shape_err(format!("expected NCHW tensor, got {t:?}")),
    }
}

fn leading(shape: &[usize]) -> Result<Vec<usize>> {
    if shape.is_empty() {
        return shape_err("expected rank >= 1, got a scalar".into());
    }
    Ok(shape[..shape.len() - 1].to_vec())
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank >= 1") = last;
    s
}

type Forward<T> = (Tensor<T>, Option<Vec<usize>>);

fn forward_op<'v, T: Real>(op: &Op, get: impl Fn(NodeId) -> &'v Tensor<T>) -> Result<Forward<T>> {
    let plain = |t: Result<Tensor<T>>| t.map(|t| (t, None));
    match op {
        Op::Leaf { .. } => unreachable!("leaves are bound, not computed"),
        Op::MatMul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            match (a.shape(), b.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => {
                    plain(Tensor::new([m, n], kernels::matmul(a.data(), b.data(), m, k, n)))
                }
                (sa, sb) => shape_err(format!("cannot multiply {sa:?} by {sb:?}")),
            }
        }
        Op::Add(a, b) => {
            let (a, b) = (get(*a), get(*b));
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
                plain(Tensor::new(a.shape(), data))
            } else if b.rank() == 1 && a.rank() >= 1 && a.last_dim() == b.len() {
                let mut data = a.data().to_vec();
                kernels::add_rows(&mut data, b.data());
                plain(Tensor::new(a.shape(), data))
            } else {
                shape_err(format!("cannot add {:?} and {:?}", a.shape(), b.shape()))
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            if a.shape() != b.shape() {
                return shape_err(format!("cannot multiply {:?} and {:?}", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            plain(Tensor::new(a.shape(), data))
        }
        Op::Exp(a) => Ok((get(*a).map(T::exp), None)),
        Op::Arctan(a) => Ok((get(*a).map(T::atan), None)),
        Op::Relu(a) => Ok((get(*a).map(|v| v.max(T::zero())), None)),
        Op::Neg(a) => Ok((get(*a).map(|v| -v), None)),
        Op::Scale(a, f) => {
            let f = T::lit(*f);
            Ok((get(*a).map(|v| v * f), None))
        }
        Op::Sum(a, reduce) => {
            let a = get(*a);
            plain(reduce_rows(a, *reduce, |row| row.iter().copied().sum()))
        }
        Op::SquaredNorm(a, reduce) => {
            let a = get(*a);
            plain(reduce_rows(a, *reduce, |row| row.iter().map(|&v| v * v).sum()))
        }
        Op::Permute(a, perm) => {
            let a = get(*a);
            if a.rank() == 0 || a.last_dim() != perm.len() {
                return shape_err(format!("permutation of length {} on shape {:?}", perm.len(), a.shape()));
            }
            let mut data = Vec::with_capacity(a.len());
            for row in a.data().chunks_exact(perm.len()) {
                data.extend(perm.iter().map(|&p| row[p]));
            }
            plain(Tensor::new(a.shape(), data))
        }
        Op::Slice { input, start, len } => {
            let a = get(*input);
            if a.rank() == 0 || start + len > a.last_dim() {
                return shape_err(format!("slice {start}..{} of shape {:?}", start + len, a.shape()));
            }
            let mut data = Vec::with_capacity(a.len() / a.last_dim() * len);
            for row in a.data().chunks_exact(a.last_dim()) {
                data.extend_from_slice(&row[*start..start + len]);
            }
            plain(Tensor::new(with_last(a.shape(), *len), data))
        }
        Op::Concat(parts) => {
            let parts: Vec<&Tensor<T>> = parts.iter().map(|&p| get(p)).collect();
            let Some(first) = parts.first() else {
                return shape_err("concat of zero tensors".into());
            };
            let lead = leading(first.shape())?;
            let mut total = 0;
            for p in &parts {
                if leading(p.shape())? != lead {
                    return shape_err(format!("concat of {:?} and {:?}", first.shape(), p.shape()));
                }
                total += p.last_dim();
            }
            let rows: usize = lead.iter().product();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in &parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            plain(Tensor::new(with_last(first.shape(), total), data))
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let x = get(*input);
            let w = get(*weight);
            let (g, out_ch) = conv_geometry(x, w, *stride, *padding)?;
            let b = bias.map(&get);
            if let Some(b) = b {
                if b.shape() != [out_ch] {
                    return shape_err(format!("conv bias {:?} for {out_ch} channels", b.shape()));
                }
            }
            let n = x.shape()[0];
            let out = kernels::conv2d_forward(x.data(), n, w.data(), b.map(|b| b.data()), out_ch, &g);
            plain(Tensor::new([n, out_ch, g.out_height(), g.out_width()], out))
        }
        Op::MaxPool2d { input, kernel, stride } => {
            let x = get(*input);
            let [n, c, h, w] = rank4(x.shape())?;
            if *kernel == 0 || *stride == 0 || h < *kernel || w < *kernel {
                return shape_err(format!("pool {kernel}/{stride} over {:?}", x.shape()));
            }
            let (out, args) = kernels::max_pool2d(x.data(), n * c, h, w, *kernel, *stride);
            let shape = [n, c, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
            Ok((Tensor::new(shape, out)?, Some(args)))
        }
        Op::GlobalAvgPool(input) => {
            let x = get(*input);
            let [n, c, h, w] = rank4(x.shape())?;
            if h * w == 0 {
                return shape_err("pooling an empty plane".into());
            }
            let inv = T::one() / T::lit((h * w) as f64);
            let data = x
                .data()
                .chunks_exact(h * w)
                .map(|p| p.iter().copied().sum::<T>() * inv)
                .collect();
            plain(Tensor::new([n, c], data))
        }
        Op::Resize { input, height, width } => {
            let x = get(*input);
            let [n, c, h, w] = rank4(x.shape())?;
            if h == 0 || w == 0 || *height == 0 || *width == 0 {
                return shape_err(format!("resize {:?} to {height}x{width}", x.shape()));
            }
            let out = kernels::resize_planes(x.data(), n * c, h, w, *height, *width);
            plain(Tensor::new([n, c, *height, *width], out))
        }
        Op::ChannelAffine { input, scale, shift } => {
            let x = get(*input);
            let [_, c, h, w] = rank4(x.shape())?;
            if scale.len() != c || shift.len() != c {
                return shape_err(format!("affine for {} channels on {c}", scale.len()));
            }
            let mut data = x.data().to_vec();
            for (p, plane) in data.chunks_exact_mut(h * w).enumerate() {
                let (s, t) = (T::lit(scale[p % c]), T::lit(shift[p % c]));
                plane.iter_mut().for_each(|v| *v = *v * s + t);
            }
            plain(Tensor::new(x.shape(), data))
        }
    }
}

fn conv_geometry<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(ConvGeometry, usize)> {
    let [_, c, h, wd] = rank4(x.shape())?;
    let [o, wc, kh, kw] = rank4(w.shape())?;
    let g = ConvGeometry {
        channels: c,
        height: h,
        width: wd,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    };
    if wc != c || !g.is_valid() {
        return shape_err(format!(
            "conv weight {:?} (stride {stride}, padding {padding}) on input {:?}",
            w.shape(),
            x.shape()
        ));
    }
    Ok((g, o))
}

fn reduce_rows<T: Real>(a: &Tensor<T>, reduce: Reduce, f: impl Fn(&[T]) -> T) -> Result<Tensor<T>> {
    match reduce {
        Reduce::All => Ok(Tensor::scalar(f(a.data()))),
        Reduce::LastAxis => {
            let lead = leading(a.shape())?;
            let d = a.last_dim();
            let data = if d == 0 {
                vec![T::zero(); lead.iter().product()]
            } else {
                a.data().chunks_exact(d).map(f).collect()
            };
            Tensor::new(lead, data)
        }
    }
}

/// Forward values of one evaluation; the source of backward passes.
#[derive(Debug)]
pub struct Execution<'a, T: Real> {
    graph: &'a Graph,
    values: Vec<Cow<'a, Tensor<T>>>,
    pool_args: HashMap<usize, Vec<usize>>,
}

/// Leaf gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    by_node: HashMap<NodeId, Tensor<T>>,
    names: HashMap<String, NodeId>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_node.get(self.names.get(name)?)
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(&id)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor<T>> {
        let id = self.names.get(name)?;
        self.by_node.remove(id)
    }
}

impl<'a, T: Real> Execution<'a, T> {
    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.values[node.0]
    }

    pub fn output(&self, name: &str) -> Option<&Tensor<T>> {
        self.graph.output_node(name).map(|id| self.value(id))
    }

    /// Every named output, cloned.
    pub fn outputs(&self) -> HashMap<String, Tensor<T>> {
        self.graph
            .outputs
            .iter()
            .map(|(n, id)| (n.clone(), self.value(*id).clone()))
            .collect()
    }

    /// Gradient of `sum(seed * output)` with respect to every leaf.
    pub fn backward(&self, output: NodeId, seed: &Tensor<T>) -> Result<Gradients<T>> {
        let all: Vec<NodeId> = self.graph.leaves.values().copied().collect();
        self.backward_wrt(output, seed, &all)
    }

    /// Like [`Execution::backward`], restricted to the leaves in `wrt`.
    /// Branches that cannot reach them are skipped.
    pub fn backward_wrt(&self, output: NodeId, seed: &Tensor<T>, wrt: &[NodeId]) -> Result<Gradients<T>> {
        let out_value = self.value(output);
        if seed.shape() != out_value.shape() {
            return shape_err(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                out_value.shape()
            ));
        }
        let nodes = &self.graph.nodes;
        let mut needs = vec![false; nodes.len()];
        for id in wrt {
            needs[id.0] = true;
        }
        for (i, op) in nodes.iter().enumerate() {
            if !needs[i] {
                needs[i] = op.inputs().iter().any(|p| needs[p.0]);
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if needs[output.0] {
            grads[output.0] = Some(seed.clone());
        }
        for i in (0..=output.0).rev() {
            if matches!(nodes[i], Op::Leaf { .. }) || !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(i, &g, &needs, &mut grads);
        }

        let names: HashMap<String, NodeId> = self
            .graph
            .leaves
            .iter()
            .filter(|(_, id)| wrt.contains(id))
            .map(|(n, id)| (n.clone(), *id))
            .collect();
        let by_node = wrt
            .iter()
            .map(|&id| {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
                (id, g)
            })
            .collect();
        Ok(Gradients { by_node, names })
    }

    fn backward_op(&self, i: usize, g: &Tensor<T>, needs: &[bool], grads: &mut [Option<Tensor<T>>]) {
        let op = &self.graph.nodes[i];
        let v = |id: NodeId| self.value(id);
        let mut acc = |id: NodeId, delta: Tensor<T>| accumulate(&mut grads[id.0], delta);
        let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
            let data = g.data().iter().zip(a.data()).map(|(&d, &x)| f(d, x)).collect();
            Tensor::new(a.shape(), data).expect("same shape")
        };
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs[a.0] {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, T::zero());
                    acc(*a, Tensor::new([m, k], da).expect("shape"));
                }
                if needs[b.0] {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, g.data(), false, &mut db, T::zero());
                    acc(*b, Tensor::new([k, n], db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                if needs[a.0] {
                    acc(*a, g.clone());
                }
                if needs[b.0] {
                    let bv = v(*b);
                    if bv.shape() == g.shape() {
                        acc(*b, g.clone());
                    } else {
                        let n = bv.len();
                        let mut db = vec![T::zero(); n];
                        for row in g.data().chunks_exact(n) {
                            for (d, &x) in db.iter_mut().zip(row) {
                                *d = *d + x;
                            }
                        }
                        acc(*b, Tensor::vector(db));
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs[a.0] {
                    acc(*a, zip(v(*b), &|d, y| d * y));
                }
                if needs[b.0] {
                    acc(*b, zip(v(*a), &|d, x| d * x));
                }
            }
            Op::Exp(a) => acc(*a, zip(self.value(NodeId(i)), &|d, y| d * y)),
            Op::Arctan(a) => acc(*a, zip(v(*a), &|d, x| d / (T::one() + x * x))),
            Op::Relu(a) => acc(*a, zip(v(*a), &|d, x| if x > T::zero() { d } else { T::zero() })),
            Op::Neg(a) => acc(*a, g.map(|d| -d)),
            Op::Scale(a, f) => {
                let f = T::lit(*f);
                acc(*a, g.map(|d| d * f))
            }
            Op::Sum(a, reduce) => {
                let av = v(*a);
                acc(*a, broadcast_back(av, g, *reduce, |d, _| d));
            }
            Op::SquaredNorm(a, reduce) => {
                let av = v(*a);
                let two = T::lit(2.0);
                acc(*a, broadcast_back(av, g, *reduce, |d, x| two * x * d));
            }
            Op::Permute(a, perm) => {
                let mut da = vec![T::zero(); g.len()];
                for (drow, grow) in da.chunks_exact_mut(perm.len()).zip(g.data().chunks_exact(perm.len())) {
                    for (j, &p) in perm.iter().enumerate() {
                        drow[p] = grow[j];
                    }
                }
                acc(*a, Tensor::new(g.shape(), da).expect("shape"));
            }
            Op::Slice { input, start, len } => {
                let av = v(*input);
                let d = av.last_dim();
                let mut da = vec![T::zero(); av.len()];
                if *len > 0 {
                    for (drow, grow) in da.chunks_exact_mut(d).zip(g.data().chunks_exact(*len)) {
                        drow[*start..start + len].copy_from_slice(grow);
                    }
                }
                acc(*input, Tensor::new(av.shape(), da).expect("shape"));
            }
            Op::Concat(parts) => {
                let total = g.last_dim();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for p in parts {
                    let pv = v(*p);
                    let w = pv.last_dim();
                    if needs[p.0] {
                        let mut dp = Vec::with_capacity(pv.len());
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(*p, Tensor::new(pv.shape(), dp).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (x, w) = (v(*input), v(*weight));
                let (geo, out_ch) = conv_geometry(x, w, *stride, *padding).expect("checked in forward");
                let n = x.shape()[0];
                let mut dx = needs[input.0].then(|| vec![T::zero(); x.len()]);
                let mut dw = needs[weight.0].then(|| vec![T::zero(); w.len()]);
                let mut db = bias.filter(|b| needs[b.0]).map(|_| vec![T::zero(); out_ch]);
                kernels::conv2d_backward(
                    x.data(),
                    n,
                    w.data(),
                    out_ch,
                    &geo,
                    g.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    acc(*input, Tensor::new(x.shape(), dx).expect("shape"));
                }
                if let Some(dw) = dw {
                    acc(*weight, Tensor::new(w.shape(), dw).expect("shape"));
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    acc(*b, Tensor::vector(db));
                }
            }
            Op::MaxPool2d { input, .. } => {
                let x = v(*input);
                let args = &self.pool_args[&i];
                let mut dx = vec![T::zero(); x.len()];
                for (&idx, &d) in args.iter().zip(g.data()) {
                    dx[idx] = dx[idx] + d;
                }
                acc(*input, Tensor::new(x.shape(), dx).expect("shape"));
            }
            Op::GlobalAvgPool(input) => {
                let x = v(*input);
                let [_, _, h, w] = rank4(x.shape()).expect("checked in forward");
                let inv = T::one() / T::lit((h * w) as f64);
                let mut dx = Vec::with_capacity(x.len());
                for &d in g.data() {
                    dx.extend(std::iter::repeat_n(d * inv, h * w));
                }
                acc(*input, Tensor::new(x.shape(), dx).expect("shape"));
            }
            Op::Resize { input, height, width } => {
                let x = v(*input);
                let [n, c, h, w] = rank4(x.shape()).expect("checked in forward");
                let mut dx = vec![T::zero(); x.len()];
                kernels::resize_planes_backward(g.data(), n * c, h, w, *height, *width, &mut dx);
                acc(*input, Tensor::new(x.shape(), dx).expect("shape"));
            }
            Op::ChannelAffine { input, scale, .. } => {
                let x = v(*input);
                let [_, c, h, w] = rank4(x.shape()).expect("checked in forward");
                let mut dx = g.data().to_vec();
                for (p, plane) in dx.chunks_exact_mut(h * w).enumerate() {
                    let s = T::lit(scale[p % c]);
                    plane.iter_mut().for_each(|d| *d = *d * s);
                }
                acc(*input, Tensor::new(x.shape(), dx).expect("shape"));
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e = *e + *d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn broadcast_back<T: Real>(input: &Tensor<T>, g: &Tensor<T>, reduce: Reduce, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = match reduce {
        Reduce::All => {
            let d = g.data()[0];
            input.data().iter().map(|&x| f(d, x)).collect()
        }
        Reduce::LastAxis => {
            let w = input.last_dim();
            let mut out = Vec::with_capacity(input.len());
            if w > 0 {
                for (row, &d) in input.data().chunks_exact(w).zip(g.data()) {
                    out.extend(row.iter().map(|&x| f(d, x)));
                }
            }
            out
        }
    };
    Tensor::new(input.shape(), data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph(build: impl FnOnce(&mut GraphBuilder, NodeId) -> NodeId) -> (Graph, NodeId) {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", &[]);
        let y = build(&mut b, x);
        b.output("y", y);
        (b.build(), y)
    }

    #[test]
    fn square_and_derivative() {
        let (g, y) = scalar_graph(|b, x| b.mul(x, x));
        let mut inputs = Bindings::new();
        inputs.bind_owned("x", Tensor::scalar(3.0f64));
        let exec = g.evaluate(inputs).unwrap();
        assert_eq!(exec.output("y").unwrap().data(), &[9.0]);
        let grads = exec.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn redeclared_leaf_is_shared() {
        let (g, y) = scalar_graph(|b, x| {
            let again = b.leaf("x", &[]);
            assert_eq!(again, x);
            b.mul(x, again)
        });
        let mut inputs = Bindings::new();
        inputs.bind_owned("x", Tensor::scalar(-2.0f64));
        let exec = g.evaluate(inputs).unwrap();
        let grads = exec.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[-4.0]);
    }

    #[test]
    fn arctan_at_zero() {
        let (g, y) = scalar_graph(|b, x| b.arctan(x));
        let mut inputs = Bindings::new();
        inputs.bind_owned("x", Tensor::scalar(0.0f64));
        let exec = g.evaluate(inputs).unwrap();
        assert_eq!(exec.value(y).data(), &[0.0]);
        let grads = exec.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0]);
    }

    #[test]
    fn matmul_by_identity() {
        let mut b = GraphBuilder::new();
        let a = b.leaf("a", &[2, 2]);
        let i = b.leaf("b", &[2, 2]);
        let y = b.matmul(a, i);
        b.output("y", y);
        let g = b.build();
        let at = Tensor::new([2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let it = Tensor::new([2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let mut inputs = Bindings::new();
        inputs.bind("a", &at).bind("b", &it);
        let exec = g.evaluate(inputs).unwrap();
        assert_eq!(exec.output("y").unwrap(), &at);
    }

    #[test]
    fn input_errors() {
        let (g, _) = scalar_graph(|b, x| b.exp(x));
        assert!(matches!(
            g.evaluate::<f32>(Bindings::new()),
            Err(Error::MissingInput(_))
        ));
        let mut inputs = Bindings::new();
        inputs
            .bind_owned("x", Tensor::scalar(1.0f32))
            .bind_owned("z", Tensor::scalar(1.0));
        assert!(matches!(g.evaluate(inputs), Err(Error::UnknownInput(_))));
        let mut inputs = Bindings::new();
        inputs.bind_owned("x", Tensor::vector(vec![1.0f32]));
        assert!(matches!(g.evaluate(inputs), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut b = GraphBuilder::new();
        let a = b.leaf("a", &[2, 3]);
        let c = b.leaf("c", &[2, 3]);
        b.matmul(a, c);
        let g = b.build();
        let mut inputs = Bindings::new();
        inputs
            .bind_owned("a", Tensor::<f32>::zeros([2, 3]))
            .bind_owned("c", Tensor::zeros([2, 3]));
        assert!(matches!(g.evaluate(inputs), Err(Error::Shape(_))));
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_is_reported() {
        let (g, _) = scalar_graph(|b, x| b.exp(x));
        let mut inputs = Bindings::new();
        inputs.bind_owned("x", Tensor::scalar(1000.0f32));
        assert!(matches!(g.evaluate(inputs), Err(Error::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn seed_shape_is_checked() {
        let (g, y) = scalar_graph(|b, x| b.neg(x));
        let mut inputs = Bindings::new();
        inputs.bind_owned("x", Tensor::scalar(1.0f32));
        let exec = g.evaluate(inputs).unwrap();
        assert!(exec.backward(y, &Tensor::vector(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let perm = [2usize, 0, 3, 1];
        let mut inv = [0usize; 4];
        for (j, &p) in perm.iter().enumerate() {
            inv[p] = j;
        }
        let mut b = GraphBuilder::new();
        let x = b.leaf_pattern("x", &[None, Some(4)]);
        let p = b.permute(x, &perm).unwrap();
        let q = b.permute(p, &inv).unwrap();
        b.output("y", q);
        let g = b.build();
        let xt = Tensor::new([2, 4], vec![0.1f32, -2.5, 3.25, 7.0, 1e-7, 8.0, -0.0, 4.5]).unwrap();
        let mut inputs = Bindings::new();
        inputs.bind("x", &xt);
        let exec = g.evaluate(inputs).unwrap();
        assert_eq!(exec.output("y").unwrap().data(), xt.data());
        assert!(b_permute_rejects_non_bijection());
    }

    fn b_permute_rejects_non_bijection() -> bool {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", &[3]);
        b.permute(x, &[0, 0, 1]).is_err() && b.permute(x, &[0, 1, 3]).is_err()
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", &[2]);
        let _unused = b.leaf("u", &[3]);
        let y = b.sum(x, Reduce::All);
        let g = b.build();
        let mut inputs = Bindings::new();
        inputs
            .bind_owned("x", Tensor::vector(vec![1.0f64, 2.0]))
            .bind_owned("u", Tensor::vector(vec![0.0; 3]));
        let exec = g.evaluate(inputs).unwrap();
        let grads = exec.backward(y, &Tensor::scalar(2.0)).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.get("u").unwrap().data(), &[0.0; 3]);
    }
}
