//! Layer graphs: declarative DAGs of tensor operations with named
//! parameters, topological forward/backward execution, static shape
//! inference, and analytic parameter counting.
//!
//! Nodes may only reference earlier nodes, so a graph is acyclic by
//! construction and node order is already a topological order.

mod builders;
#[cfg(test)]
mod tests;
mod rf;

pub use builders::*;
pub use rf::{effective_kernel, receptive_field, RfState};


use rand_chacha::ChaCha8Rng;

use crate::conv;
use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, Mode};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor, TensorBase};

pub type NodeId = usize;

/// How a bilinear node picks its target size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeTarget {
    Fixed { h: usize, w: usize },
    /// Integer upscale of the input dims.
    Scale { factor: usize },
    /// Match the spatial dims of a second (reference) input edge.
    MatchRef,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    /// Convolution; `rate > 1` makes it dilated.
    Conv {
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        rate: (usize, usize),
        padding: (usize, usize),
        bias: bool,
    },
    Relu,
    BatchNorm {
        channels: usize,
    },
    Dropout {
        p: f32,
    },
    Bilinear {
        target: ResizeTarget,
    },
    GlobalAvgPool,
    MaxPool {
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// Squeeze-and-excitation channel gate.
    SeGate {
        channels: usize,
        reduction: usize,
    },
    Concat,
    Sum,
    /// Channel slice `index` of `parts` equal groups.
    Split {
        index: usize,
        parts: usize,
    },
    Softmax,
}

impl LayerKind {
    /// Shapes of the trainable tensors this layer owns, with name suffixes.
    pub fn param_shapes(&self) -> Vec<(&'static str, Shape)> {
        match self {
            LayerKind::Conv {
                out_ch,
                in_ch,
                kh,
                kw,
                bias,
                ..
            } => {
                let mut v = vec![("weight", Shape::new(*out_ch, *in_ch, *kh, *kw))];
                if *bias {
                    v.push(("bias", Shape::new(1, 1, 1, *out_ch)));
                }
                v
            }
            LayerKind::BatchNorm { channels } => vec![
                ("gamma", Shape::new(1, 1, 1, *channels)),
                ("beta", Shape::new(1, 1, 1, *channels)),
            ],
            LayerKind::SeGate {
                channels,
                reduction,
            } => {
                let mid = se_mid(*channels, *reduction);
                vec![
                    ("w1", Shape::new(mid, *channels, 1, 1)),
                    ("b1", Shape::new(1, 1, 1, mid)),
                    ("w2", Shape::new(*channels, mid, 1, 1)),
                    ("b2", Shape::new(1, 1, 1, *channels)),
                ]
            }
            _ => Vec::new(),
        }
    }

    /// Shapes of non-trainable state (batchnorm running statistics).
    pub fn buffer_shapes(&self) -> Vec<(&'static str, Shape)> {
        match self {
            LayerKind::BatchNorm { channels } => vec![
                ("running_mean", Shape::new(1, 1, 1, *channels)),
                ("running_var", Shape::new(1, 1, 1, *channels)),
            ],
            _ => Vec::new(),
        }
    }

    fn arity(&self) -> (usize, usize) {
        match self {
            LayerKind::Input { .. } => (0, 0),
            LayerKind::Concat | LayerKind::Sum => (2, usize::MAX),
            LayerKind::Bilinear {
                target: ResizeTarget::MatchRef,
            } => (2, 2),
            _ => (1, 1),
        }
    }
}

pub fn se_mid(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(1)
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    /// Output channel count, fixed at build time.
    pub out_channels: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GraphMeta {
    pub name: String,
    pub head_kind: Option<String>,
    pub rates: Vec<usize>,
}

/// A DAG of layers plus their parameters.
#[derive(Debug, Clone)]
pub struct ModuleGraph {
    nodes: Vec<Node>,
    input_nodes: Vec<NodeId>,
    output_node: NodeId,
    /// Trainable tensors per node; empty until [`ModuleGraph::init_parameters`].
    params: Vec<Vec<Tensor>>,
    grads: Vec<Vec<Tensor>>,
    buffers: Vec<Vec<Tensor>>,
    pub meta: GraphMeta,
}

pub struct GraphBuilder {
    nodes: Vec<Node>,
    input_nodes: Vec<NodeId>,
    meta: GraphMeta,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            input_nodes: Vec::new(),
            meta: GraphMeta {
                name: name.into(),
                ..GraphMeta::default()
            },
        }
    }

    pub fn meta_mut(&mut self) -> &mut GraphMeta {
        &mut self.meta
    }

    pub fn input(&mut self, name: impl Into<String>, channels: usize) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            name: name.into(),
            kind: LayerKind::Input { channels },
            inputs: Vec::new(),
            out_channels: channels,
        });
        self.input_nodes.push(id);
        id
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].out_channels
    }

    /// Append a layer reading from `inputs`. Edges may only point backwards,
    /// which keeps the graph acyclic and node order topological.
    pub fn add(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[NodeId]) -> Result<NodeId> {
        let name = name.into();
        let id = self.nodes.len();
        for &i in inputs {
            if i >= id {
                return Err(Error::InvalidArgument(format!(
                    "layer {name}: input edge {i} does not precede node {id}"
                )));
            }
        }
        let (min_in, max_in) = kind.arity();
        if inputs.len() < min_in || inputs.len() > max_in {
            return Err(Error::InvalidArgument(format!(
                "layer {name}: {} inputs given, expected between {min_in} and {}",
                inputs.len(),
                if max_in == usize::MAX { "any".into() } else { max_in.to_string() }
            )));
        }
        let in_ch: Vec<usize> = inputs.iter().map(|i| self.nodes[*i].out_channels).collect();
        let out_channels = match &kind {
            LayerKind::Input { .. } => {
                return Err(Error::InvalidArgument(
                    "add: use GraphBuilder::input for input nodes".into(),
                ))
            }
            LayerKind::Conv { in_ch: want, out_ch, .. } => {
                if in_ch[0] != *want {
                    return Err(Error::shape(
                        format!("layer {name}"),
                        format!("conv expects {} input channels, edge carries {}", want, in_ch[0]),
                    ));
                }
                *out_ch
            }
            LayerKind::BatchNorm { channels } | LayerKind::SeGate { channels, .. } => {
                if in_ch[0] != *channels {
                    return Err(Error::shape(
                        format!("layer {name}"),
                        format!("expects {} channels, edge carries {}", channels, in_ch[0]),
                    ));
                }
                *channels
            }
            LayerKind::Concat => in_ch.iter().sum(),
            LayerKind::Sum => {
                if in_ch.iter().any(|c| *c != in_ch[0]) {
                    return Err(Error::shape(
                        format!("layer {name}"),
                        format!("sum inputs carry differing channels {:?}", in_ch),
                    ));
                }
                in_ch[0]
            }
            LayerKind::Split { index, parts } => {
                if *parts == 0 || in_ch[0] % parts != 0 {
                    return Err(Error::shape(
                        format!("layer {name}"),
                        format!("{} channels not divisible into {} groups", in_ch[0], parts),
                    ));
                }
                if index >= parts {
                    return Err(Error::InvalidArgument(format!(
                        "layer {name}: split index {index} out of {parts} groups"
                    )));
                }
                in_ch[0] / parts
            }
            LayerKind::Bilinear { target } => {
                if let ResizeTarget::Fixed { h, w } = target {
                    if *h == 0 || *w == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {name}: zero resize target"
                        )));
                    }
                }
                if let ResizeTarget::Scale { factor } = target {
                    if *factor == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {name}: zero scale factor"
                        )));
                    }
                }
                in_ch[0]
            }
            LayerKind::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {name}: dropout p {p} outside [0,1)"
                    )));
                }
                in_ch[0]
            }
            _ => in_ch[0],
        };
        self.nodes.push(Node {
            name,
            kind,
            inputs: inputs.to_vec(),
            out_channels,
        });
        Ok(id)
    }

    pub fn finish(self, output: NodeId) -> Result<ModuleGraph> {
        if output >= self.nodes.len() {
            return Err(Error::InvalidArgument("finish: unknown output node".into()));
        }
        if self.input_nodes.is_empty() {
            return Err(Error::InvalidArgument("finish: graph has no input node".into()));
        }
        let n = self.nodes.len();
        Ok(ModuleGraph {
            nodes: self.nodes,
            input_nodes: self.input_nodes,
            output_node: output,
            params: vec![Vec::new(); n],
            grads: vec![Vec::new(); n],
            buffers: vec![Vec::new(); n],
            meta: self.meta,
        })
    }
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardTrace<T> {
    outputs: Vec<Option<TensorBase<T>>>,
    aux: Vec<Aux<T>>,
}

enum Aux<T> {
    None,
    BatchNorm(BatchNormCache),
    DropoutMask(Vec<T>),
    MaxPool(Vec<usize>),
    Softmax(TensorBase<T>),
    Se {
        pooled: TensorBase<T>,
        hidden_pre: TensorBase<T>,
        hidden: TensorBase<T>,
        gate: TensorBase<T>,
    },
}

impl ModuleGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn input_nodes(&self) -> &[NodeId] {
        &self.input_nodes
    }

    pub fn output_node(&self) -> NodeId {
        self.output_node
    }

    pub fn find_node(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Total trainable parameter element count; a pure function of the
    /// layer specs, independent of whether tensors are allocated.
    pub fn count_parameters(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.kind.param_shapes().iter().map(|(_, s)| s.len()).sum::<usize>())
            .sum()
    }

    pub fn params_initialized(&self) -> bool {
        self.nodes
            .iter()
            .zip(&self.params)
            .all(|(n, p)| n.kind.param_shapes().len() == p.len())
    }

    /// Allocate and seed every parameter tensor. Conv and gate weights get
    /// fan-in-scaled normal values, biases zero, batchnorm gamma one.
    pub fn init_parameters(&mut self, seed: u64) {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, node) in self.nodes.iter().enumerate() {
            let mut tensors = Vec::new();
            for (suffix, shape) in node.kind.param_shapes() {
                let t = match (&node.kind, suffix) {
                    (LayerKind::Conv { in_ch, kh, kw, .. }, "weight") => {
                        let std = (2.0 / (in_ch * kh * kw) as f64).sqrt();
                        random_normal(&mut rng, shape, std)
                    }
                    (LayerKind::SeGate { .. }, "w1") | (LayerKind::SeGate { .. }, "w2") => {
                        let fan_in = shape.c;
                        let std = (2.0 / fan_in as f64).sqrt();
                        random_normal(&mut rng, shape, std)
                    }
                    (LayerKind::BatchNorm { .. }, "gamma") => Tensor::filled(shape, 1.0),
                    _ => Tensor::zeros(shape),
                };
                tensors.push(t);
            }
            self.grads[i] = tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
            self.params[i] = tensors;
            self.buffers[i] = node
                .kind
                .buffer_shapes()
                .iter()
                .map(|(suffix, shape)| {
                    if *suffix == "running_var" {
                        Tensor::filled(*shape, 1.0)
                    } else {
                        Tensor::zeros(*shape)
                    }
                })
                .collect();
        }
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// (name, tensor) pairs in deterministic node order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            for ((suffix, _), t) in node.kind.param_shapes().iter().zip(&self.params[i]) {
                out.push((format!("{}.{}", node.name, suffix), t));
            }
            for ((suffix, _), t) in node.kind.buffer_shapes().iter().zip(&self.buffers[i]) {
                out.push((format!("{}.{}", node.name, suffix), t));
            }
        }
        out
    }

    /// Replace a parameter or buffer tensor by name (used by the loader).
    pub fn set_parameter(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            for (j, (suffix, shape)) in node.kind.param_shapes().iter().enumerate() {
                if format!("{}.{}", node.name, suffix) == name {
                    if tensor.shape() != *shape {
                        return Err(Error::shape(
                            format!("set_parameter {name}"),
                            format!("expected {}, got {}", shape, tensor.shape()),
                        ));
                    }
                    if self.params[i].len() <= j {
                        return Err(Error::InvalidArgument(format!(
                            "set_parameter {name}: parameters not initialized"
                        )));
                    }
                    self.params[i][j] = tensor;
                    return Ok(());
                }
            }
            for (j, (suffix, shape)) in node.kind.buffer_shapes().iter().enumerate() {
                if format!("{}.{}", node.name, suffix) == name {
                    if tensor.shape() != *shape {
                        return Err(Error::shape(
                            format!("set_parameter {name}"),
                            format!("expected {}, got {}", shape, tensor.shape()),
                        ));
                    }
                    self.buffers[i][j] = tensor;
                    return Ok(());
                }
            }
        }
        Err(Error::InvalidArgument(format!("set_parameter: no tensor named {name}")))
    }

    pub fn param_tensors(&self, id: NodeId) -> &[Tensor] {
        &self.params[id]
    }

    pub fn grad_tensors(&self, id: NodeId) -> &[Tensor] {
        &self.grads[id]
    }

    /// Mutable access for the optimizer: (param, grad) pairs over all nodes.
    pub fn params_and_grads_mut(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        self.params
            .iter_mut()
            .zip(self.grads.iter())
            .flat_map(|(ps, gs)| ps.iter_mut().zip(gs.iter()))
            .collect()
    }

    /// Cast all parameter tensors for the f64 shadow path.
    pub fn params_cast<T: Scalar>(&self) -> Vec<Vec<TensorBase<T>>> {
        self.params
            .iter()
            .map(|ps| ps.iter().map(|t| t.cast::<T>()).collect())
            .collect()
    }

    pub fn buffers_cast<T: Scalar>(&self) -> Vec<Vec<TensorBase<T>>> {
        self.buffers
            .iter()
            .map(|bs| bs.iter().map(|t| t.cast::<T>()).collect())
            .collect()
    }

    /// Static shape propagation from the given input shapes; validates
    /// channel consistency and that every spatial extent stays >= 1.
    pub fn infer_shapes(&self, input_shapes: &[Shape]) -> Result<Vec<Shape>> {
        if input_shapes.len() != self.input_nodes.len() {
            return Err(Error::shape(
                "infer_shapes",
                format!("graph has {} inputs, {} shapes given", self.input_nodes.len(), input_shapes.len()),
            ));
        }
        let mut shapes: Vec<Option<Shape>> = vec![None; self.nodes.len()];
        for (slot, shape) in self.input_nodes.iter().zip(input_shapes) {
            let want = self.nodes[*slot].out_channels;
            if shape.c != want {
                return Err(Error::shape(
                    format!("input {}", self.nodes[*slot].name),
                    format!("expects {} channels, got {}", want, shape.c),
                ));
            }
            shapes[*slot] = Some(*shape);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.kind, LayerKind::Input { .. }) {
                continue;
            }
            let ins: Vec<Shape> = node
                .inputs
                .iter()
                .map(|i| shapes[*i].ok_or_else(|| Error::InvalidArgument(format!("node {} reads unset node", node.name))))
                .collect::<Result<_>>()?;
            shapes[id] = Some(node_output_shape(node, &ins)?);
        }
        Ok(shapes.into_iter().map(|s| s.unwrap()).collect())
    }

    pub fn output_shape(&self, input_shapes: &[Shape]) -> Result<Shape> {
        Ok(self.infer_shapes(input_shapes)?[self.output_node])
    }

    /// Eval-mode forward pass (pure, deterministic).
    pub fn forward(&self, xs: &[&Tensor]) -> Result<Tensor> {
        let (out, _) = run_forward(
            &self.nodes,
            &self.input_nodes,
            self.output_node,
            &self.params,
            &self.buffers,
            xs,
            Mode::Eval,
            None,
            false,
        )?;
        Ok(out)
    }

    /// Train-mode forward pass. Stores activations for [`ModuleGraph::backward`]
    /// and folds batch statistics into the batchnorm running estimates.
    pub fn forward_train(
        &mut self,
        xs: &[&Tensor],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, ForwardTrace<f32>)> {
        let (out, trace) = run_forward(
            &self.nodes,
            &self.input_nodes,
            self.output_node,
            &self.params,
            &self.buffers,
            xs,
            Mode::Train,
            Some(rng),
            true,
        )?;
        // fold batch stats into running estimates
        for (i, node) in self.nodes.iter().enumerate() {
            if let (LayerKind::BatchNorm { .. }, Aux::BatchNorm(cache)) = (&node.kind, &trace.aux[i]) {
                let momentum = 0.1f64;
                let bufs = &mut self.buffers[i];
                for c in 0..cache.mean.len() {
                    let rm = bufs[0].data()[c] as f64;
                    let rv = bufs[1].data()[c] as f64;
                    bufs[0].data_mut()[c] = ((1.0 - momentum) * rm + momentum * cache.mean[c]) as f32;
                    bufs[1].data_mut()[c] = ((1.0 - momentum) * rv + momentum * cache.var[c]) as f32;
                }
            }
        }
        Ok((out, trace))
    }

    /// Shadow forward in any scalar type with externally supplied parameters,
    /// eval mode. Used by the finite-difference gradient checker.
    pub fn forward_shadow<T: Scalar>(
        &self,
        params: &[Vec<TensorBase<T>>],
        buffers: &[Vec<TensorBase<T>>],
        xs: &[&TensorBase<T>],
    ) -> Result<TensorBase<T>> {
        let (out, _) = run_forward(
            &self.nodes,
            &self.input_nodes,
            self.output_node,
            params,
            buffers,
            xs,
            Mode::Eval,
            None,
            false,
        )?;
        Ok(out)
    }

    /// Smallest absolute pre-activation feeding any relu in the trace
    /// (including the hidden relu inside squeeze-excitation gates).
    /// Finite-difference checks are only meaningful when this margin is
    /// comfortably larger than the probe step times the local sensitivity.
    pub fn relu_kink_margin(&self, trace: &ForwardTrace<f32>) -> f32 {
        let mut margin = f32::INFINITY;
        for (id, node) in self.nodes.iter().enumerate() {
            match (&node.kind, &trace.aux[id]) {
                (LayerKind::Relu, _) => {
                    if let Some(x) = trace.outputs[node.inputs[0]].as_ref() {
                        for v in x.data() {
                            margin = margin.min(v.abs());
                        }
                    }
                }
                (LayerKind::SeGate { .. }, Aux::Se { hidden_pre, .. }) => {
                    for v in hidden_pre.data() {
                        margin = margin.min(v.abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass. Accumulates parameter gradients in place and returns
    /// the gradient with respect to each graph input.
    pub fn backward(&mut self, trace: &ForwardTrace<f32>, grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let out_shape = trace.outputs[self.output_node]
            .as_ref()
            .expect("trace missing output")
            .shape();
        if grad_out.shape() != out_shape {
            return Err(Error::shape(
                "backward",
                format!("grad {} but output is {}", grad_out.shape(), out_shape),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[self.output_node] = Some(grad_out.clone());

        for id in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.kind, LayerKind::Input { .. }) {
                grads[id] = Some(gout);
                continue;
            }
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|i| trace.outputs[*i].as_ref().expect("trace missing activation"))
                .collect();
            let in_grads = node_backward(
                node,
                &self.params[id],
                &trace.aux[id],
                trace.outputs[id].as_ref().expect("trace missing activation"),
                &ins,
                &gout,
                &mut self.grads[id],
            )?;
            for (edge, g) in node.inputs.iter().zip(in_grads) {
                let Some(g) = g else { continue };
                match &mut grads[*edge] {
                    Some(existing) => {
                        for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        Ok(self
            .input_nodes
            .iter()
            .map(|i| {
                grads[*i].take().unwrap_or_else(|| {
                    Tensor::zeros(trace.outputs[*i].as_ref().unwrap().shape())
                })
            })
            .collect())
    }
}

fn random_normal(rng: &mut ChaCha8Rng, shape: Shape, std: f64) -> Tensor {
    let data = (0..shape.len())
        .map(|_| (rand_distr_normal::sample_normal(rng) * std) as f32)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Small Box-Muller sampler; keeps parameter init free of distribution-crate
/// version coupling so stored models stay reproducible.
mod rand_distr_normal {
    use rand::Rng;

    pub fn sample_normal(rng: &mut impl Rng) -> f64 {
        loop {
            let u1: f64 = rng.gen::<f64>();
            let u2: f64 = rng.gen::<f64>();
            if u1 > f64::MIN_POSITIVE {
                return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        }
    }
}

fn node_output_shape(node: &Node, ins: &[Shape]) -> Result<Shape> {
    let name = &node.name;
    let first = ins[0];
    let out = match &node.kind {
        LayerKind::Input { channels } => Shape::new(first.n, *channels, first.h, first.w),
        LayerKind::Conv {
            out_ch,
            kh,
            kw,
            stride,
            rate,
            padding,
            ..
        } => {
            let oh = conv::conv_output_dim(first.h, *kh, stride.0, rate.0, padding.0);
            let ow = conv::conv_output_dim(first.w, *kw, stride.1, rate.1, padding.1);
            match (oh, ow) {
                (Some(oh), Some(ow)) => Shape::new(first.n, *out_ch, oh, ow),
                _ => {
                    return Err(Error::shape(
                        format!("layer {name}"),
                        format!("conv window does not fit {}x{}", first.h, first.w),
                    ))
                }
            }
        }
        LayerKind::MaxPool { k, stride, pad } => {
            let oh = conv::conv_output_dim(first.h, *k, *stride, 1, *pad);
            let ow = conv::conv_output_dim(first.w, *k, *stride, 1, *pad);
            match (oh, ow) {
                (Some(oh), Some(ow)) => Shape::new(first.n, first.c, oh, ow),
                _ => {
                    return Err(Error::shape(
                        format!("layer {name}"),
                        "pool window does not fit",
                    ))
                }
            }
        }
        LayerKind::GlobalAvgPool => Shape::new(first.n, first.c, 1, 1),
        LayerKind::Bilinear { target } => match target {
            ResizeTarget::Fixed { h, w } => Shape::new(first.n, first.c, *h, *w),
            ResizeTarget::Scale { factor } => {
                Shape::new(first.n, first.c, first.h * factor, first.w * factor)
            }
            ResizeTarget::MatchRef => Shape::new(first.n, first.c, ins[1].h, ins[1].w),
        },
        LayerKind::Concat => {
            let mut c = 0;
            for s in ins {
                if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                    return Err(Error::shape(
                        format!("layer {name}"),
                        format!("concat inputs disagree: {} vs {}", first, s),
                    ));
                }
                c += s.c;
            }
            Shape::new(first.n, c, first.h, first.w)
        }
        LayerKind::Sum => {
            for s in ins {
                if *s != first {
                    return Err(Error::shape(
                        format!("layer {name}"),
                        format!("sum inputs disagree: {} vs {}", first, s),
                    ));
                }
            }
            first
        }
        LayerKind::Split { parts, .. } => Shape::new(first.n, first.c / parts, first.h, first.w),
        LayerKind::Relu
        | LayerKind::BatchNorm { .. }
        | LayerKind::Dropout { .. }
        | LayerKind::SeGate { .. }
        | LayerKind::Softmax => first,
    };
    if out.h < 1 || out.w < 1 || out.c < 1 {
        return Err(Error::shape(
            format!("layer {name}"),
            format!("degenerate output shape {}", out),
        ));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_forward<T: Scalar>(
    nodes: &[Node],
    input_nodes: &[NodeId],
    output_node: NodeId,
    params: &[Vec<TensorBase<T>>],
    buffers: &[Vec<TensorBase<T>>],
    xs: &[&TensorBase<T>],
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
    keep: bool,
) -> Result<(TensorBase<T>, ForwardTrace<T>)> {
    if xs.len() != input_nodes.len() {
        return Err(Error::shape(
            "forward",
            format!("graph has {} inputs, {} tensors given", input_nodes.len(), xs.len()),
        ));
    }
    let mut outputs: Vec<Option<TensorBase<T>>> = vec![None; nodes.len()];
    let mut aux: Vec<Aux<T>> = (0..nodes.len()).map(|_| Aux::None).collect();

    // remaining-consumer counts let eval mode drop activations early
    let mut pending = vec![0usize; nodes.len()];
    for node in nodes {
        for i in &node.inputs {
            pending[*i] += 1;
        }
    }
    pending[output_node] += 1;

    for (slot, x) in input_nodes.iter().zip(xs) {
        let want = nodes[*slot].out_channels;
        if x.shape().c != want {
            return Err(Error::shape(
                format!("input {}", nodes[*slot].name),
                format!("expects {} channels, got {}", want, x.shape().c),
            ));
        }
        outputs[*slot] = Some((*x).clone());
    }

    for id in 0..nodes.len() {
        let node = &nodes[id];
        if matches!(node.kind, LayerKind::Input { .. }) {
            continue;
        }
        let out = {
            let ins: Vec<&TensorBase<T>> = node
                .inputs
                .iter()
                .map(|i| {
                    outputs[*i]
                        .as_ref()
                        .ok_or_else(|| Error::InvalidArgument(format!("node {} reads unset node", node.name)))
                })
                .collect::<Result<_>>()?;
            if params[id].len() != node.kind.param_shapes().len() {
                return Err(Error::InvalidArgument(format!(
                    "layer {}: parameters not initialized",
                    node.name
                )));
            }
            let (out, a) = node_forward(node, &params[id], &buffers[id], &ins, mode, rng.as_deref_mut())?;
            aux[id] = a;
            out
        };
        outputs[id] = Some(out);
        if !keep {
            for i in &node.inputs {
                pending[*i] -= 1;
                if pending[*i] == 0 && *i != output_node {
                    outputs[*i] = None;
                }
            }
        }
    }

    let result = outputs[output_node]
        .as_ref()
        .expect("output node not computed")
        .clone();
    Ok((result, ForwardTrace { outputs, aux }))
}

fn node_forward<T: Scalar>(
    node: &Node,
    params: &[TensorBase<T>],
    buffers: &[TensorBase<T>],
    ins: &[&TensorBase<T>],
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(TensorBase<T>, Aux<T>)> {
    let x = ins[0];
    let named = |e: Error| match e {
        Error::ShapeMismatch { details, .. } => Error::shape(format!("layer {}", node.name), details),
        other => other,
    };
    match &node.kind {
        LayerKind::Input { .. } => unreachable!("input nodes are seeded directly"),
        LayerKind::Conv {
            stride, rate, padding, bias, ..
        } => {
            let b = if *bias { Some(params[1].data()) } else { None };
            let y = conv::conv2d_t(x, &params[0], b, *stride, *rate, *padding).map_err(named)?;
            Ok((y, Aux::None))
        }
        LayerKind::Relu => Ok((ops::relu_t(x), Aux::None)),
        LayerKind::BatchNorm { .. } => match mode {
            Mode::Eval => {
                let y = ops::batchnorm_eval_t(
                    x,
                    params[0].data(),
                    params[1].data(),
                    buffers[0].data(),
                    buffers[1].data(),
                    1e-5,
                )
                .map_err(named)?;
                Ok((y, Aux::None))
            }
            Mode::Train => {
                let (y, cache) =
                    ops::batchnorm_train_t(x, params[0].data(), params[1].data(), 1e-5).map_err(named)?;
                Ok((y, Aux::BatchNorm(cache)))
            }
        },
        LayerKind::Dropout { p } => match mode {
            Mode::Eval => Ok((x.clone(), Aux::None)),
            Mode::Train => {
                let rng = rng.ok_or_else(|| {
                    Error::InvalidArgument(format!("layer {}: train mode needs an rng", node.name))
                })?;
                use rand::Rng;
                let keep = 1.0 - *p as f64;
                let scale = T::from_f64(1.0 / keep);
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { T::ZERO })
                    .collect();
                let mut y = x.clone();
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v *= *m;
                }
                Ok((y, Aux::DropoutMask(mask)))
            }
        },
        LayerKind::Bilinear { target } => {
            let (h, w) = match target {
                ResizeTarget::Fixed { h, w } => (*h, *w),
                ResizeTarget::Scale { factor } => (x.shape().h * factor, x.shape().w * factor),
                ResizeTarget::MatchRef => (ins[1].shape().h, ins[1].shape().w),
            };
            Ok((ops::bilinear_resize_t(x, h, w).map_err(named)?, Aux::None))
        }
        LayerKind::GlobalAvgPool => Ok((ops::global_avg_pool_t(x).map_err(named)?, Aux::None)),
        LayerKind::MaxPool { k, stride, pad } => {
            let (y, argmax) = ops::max_pool_t(x, *k, *stride, *pad).map_err(named)?;
            Ok((y, Aux::MaxPool(argmax)))
        }
        LayerKind::SeGate { .. } => {
            let pooled = ops::global_avg_pool_t(x).map_err(named)?;
            let hidden_pre =
                conv::conv2d_t(&pooled, &params[0], Some(params[1].data()), (1, 1), (1, 1), (0, 0))
                    .map_err(named)?;
            let hidden = ops::relu_t(&hidden_pre);
            let gate_pre =
                conv::conv2d_t(&hidden, &params[2], Some(params[3].data()), (1, 1), (1, 1), (0, 0))
                    .map_err(named)?;
            let gate = ops::sigmoid_t(&gate_pre);
            let s = x.shape();
            let mut y = x.clone();
            let plane = s.h * s.w;
            for pc in 0..s.n * s.c {
                let g = gate.data()[pc];
                for v in &mut y.data_mut()[pc * plane..(pc + 1) * plane] {
                    *v *= g;
                }
            }
            Ok((
                y,
                Aux::Se {
                    pooled,
                    hidden_pre,
                    hidden,
                    gate,
                },
            ))
        }
        LayerKind::Concat => {
            let first = ins[0].shape();
            let mut c = 0usize;
            for t in ins {
                let s = t.shape();
                if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                    return Err(Error::shape(
                        format!("layer {}", node.name),
                        format!("concat inputs disagree: {} vs {}", first, s),
                    ));
                }
                c += s.c;
            }
            let out_shape = Shape::new(first.n, c, first.h, first.w);
            let mut y = TensorBase::<T>::zeros(out_shape);
            let plane = first.h * first.w;
            for b in 0..first.n {
                let mut at_c = 0usize;
                for t in ins {
                    let tc = t.shape().c;
                    let src = &t.data()[b * tc * plane..(b + 1) * tc * plane];
                    let dst_base = (b * c + at_c) * plane;
                    y.data_mut()[dst_base..dst_base + tc * plane].copy_from_slice(src);
                    at_c += tc;
                }
            }
            Ok((y, Aux::None))
        }
        LayerKind::Sum => {
            let mut y = ins[0].clone();
            for t in &ins[1..] {
                if t.shape() != y.shape() {
                    return Err(Error::shape(
                        format!("layer {}", node.name),
                        format!("sum inputs disagree: {} vs {}", y.shape(), t.shape()),
                    ));
                }
                for (a, b) in y.data_mut().iter_mut().zip(t.data()) {
                    *a += *b;
                }
            }
            Ok((y, Aux::None))
        }
        LayerKind::Split { index, parts } => {
            let s = x.shape();
            let group = s.c / parts;
            let mut y = TensorBase::<T>::zeros(Shape::new(s.n, group, s.h, s.w));
            let plane = s.h * s.w;
            for b in 0..s.n {
                let src_base = (b * s.c + index * group) * plane;
                let dst_base = b * group * plane;
                y.data_mut()[dst_base..dst_base + group * plane]
                    .copy_from_slice(&x.data()[src_base..src_base + group * plane]);
            }
            Ok((y, Aux::None))
        }
        LayerKind::Softmax => {
            let y = ops::softmax_channels_t(x).map_err(named)?;
            Ok((y.clone(), Aux::Softmax(y)))
        }
    }
}

/// Per-node reverse rule. Returns one optional gradient per input edge and
/// accumulates parameter gradients into `param_grads`.
fn node_backward(
    node: &Node,
    params: &[Tensor],
    aux: &Aux<f32>,
    _out: &Tensor,
    ins: &[&Tensor],
    gout: &Tensor,
    param_grads: &mut [Tensor],
) -> Result<Vec<Option<Tensor>>> {
    let x = ins[0];
    match &node.kind {
        LayerKind::Input { .. } => unreachable!(),
        LayerKind::Conv {
            stride, rate, padding, bias, ..
        } => {
            let (gx, gk, gb) =
                conv::conv2d_backward_t(x, &params[0], *bias, *stride, *rate, *padding, gout)?;
            accumulate(&mut param_grads[0], &gk);
            if let Some(gb) = gb {
                accumulate(&mut param_grads[1], &gb);
            }
            Ok(vec![Some(gx)])
        }
        LayerKind::Relu => Ok(vec![Some(ops::relu_backward_t(x, gout))]),
        LayerKind::BatchNorm { .. } => {
            let Aux::BatchNorm(cache) = aux else {
                return Err(Error::InvalidArgument(format!(
                    "layer {}: backward without a train-mode forward",
                    node.name
                )));
            };
            let (gx, ggamma, gbeta) =
                ops::batchnorm_train_backward_t(x, params[0].data(), cache, 1e-5, gout);
            for (dst, g) in param_grads[0].data_mut().iter_mut().zip(&ggamma) {
                *dst += *g;
            }
            for (dst, g) in param_grads[1].data_mut().iter_mut().zip(&gbeta) {
                *dst += *g;
            }
            Ok(vec![Some(gx)])
        }
        LayerKind::Dropout { .. } => match aux {
            Aux::DropoutMask(mask) => {
                let mut g = gout.clone();
                for (v, m) in g.data_mut().iter_mut().zip(mask) {
                    *v *= *m;
                }
                Ok(vec![Some(g)])
            }
            _ => Ok(vec![Some(gout.clone())]), // eval-mode identity
        },
        LayerKind::Bilinear { .. } => {
            let gx = ops::bilinear_resize_backward_t(x.shape(), gout)?;
            let mut grads = vec![Some(gx)];
            if ins.len() > 1 {
                grads.push(None); // reference edge only supplies dims
            }
            Ok(grads)
        }
        LayerKind::GlobalAvgPool => Ok(vec![Some(ops::global_avg_pool_backward_t(x.shape(), gout))]),
        LayerKind::MaxPool { .. } => {
            let Aux::MaxPool(argmax) = aux else {
                return Err(Error::InvalidArgument(format!(
                    "layer {}: missing pooling trace",
                    node.name
                )));
            };
            Ok(vec![Some(ops::max_pool_backward_t(x.shape(), argmax, gout))])
        }
        LayerKind::SeGate { .. } => {
            let Aux::Se {
                pooled,
                hidden_pre,
                hidden,
                gate,
            } = aux
            else {
                return Err(Error::InvalidArgument(format!(
                    "layer {}: missing gate trace",
                    node.name
                )));
            };
            let s = x.shape();
            let plane = s.h * s.w;
            // path 1: y = x * gate  ->  dx_direct, dgate
            let mut gx = gout.clone();
            let mut ggate = Tensor::zeros(gate.shape());
            for pc in 0..s.n * s.c {
                let g = gate.data()[pc];
                let mut acc = 0.0f64;
                for i in pc * plane..(pc + 1) * plane {
                    acc += gout.data()[i] as f64 * x.data()[i] as f64;
                    gx.data_mut()[i] *= g;
                }
                ggate.data_mut()[pc] = acc as f32;
            }
            // sigmoid
            let mut ggate_pre = ggate;
            for (v, g) in ggate_pre.data_mut().iter_mut().zip(gate.data()) {
                *v *= g * (1.0 - g);
            }
            // second 1x1
            let (ghidden, gw2, gb2) =
                conv::conv2d_backward_t(hidden, &params[2], true, (1, 1), (1, 1), (0, 0), &ggate_pre)?;
            accumulate(&mut param_grads[2], &gw2);
            accumulate(&mut param_grads[3], &gb2.unwrap());
            // relu
            let ghidden_pre = ops::relu_backward_t(hidden_pre, &ghidden);
            // first 1x1
            let (gpooled, gw1, gb1) =
                conv::conv2d_backward_t(pooled, &params[0], true, (1, 1), (1, 1), (0, 0), &ghidden_pre)?;
            accumulate(&mut param_grads[0], &gw1);
            accumulate(&mut param_grads[1], &gb1.unwrap());
            // pooling
            let gx_pool = ops::global_avg_pool_backward_t(s, &gpooled);
            for (a, b) in gx.data_mut().iter_mut().zip(gx_pool.data()) {
                *a += *b;
            }
            Ok(vec![Some(gx)])
        }
        LayerKind::Concat => {
            let first = ins[0].shape();
            let plane = first.h * first.w;
            let total_c = gout.shape().c;
            let mut out = Vec::with_capacity(ins.len());
            let mut at_c = 0usize;
            for t in ins {
                let tc = t.shape().c;
                let mut g = Tensor::zeros(t.shape());
                for b in 0..first.n {
                    let src_base = (b * total_c + at_c) * plane;
                    let dst_base = b * tc * plane;
                    g.data_mut()[dst_base..dst_base + tc * plane]
                        .copy_from_slice(&gout.data()[src_base..src_base + tc * plane]);
                }
                at_c += tc;
                out.push(Some(g));
            }
            Ok(out)
        }
        LayerKind::Sum => Ok(ins.iter().map(|_| Some(gout.clone())).collect()),
        LayerKind::Split { index, parts } => {
            let s = x.shape();
            let group = s.c / parts;
            let plane = s.h * s.w;
            let mut g = Tensor::zeros(s);
            for b in 0..s.n {
                let dst_base = (b * s.c + index * group) * plane;
                let src_base = b * group * plane;
                g.data_mut()[dst_base..dst_base + group * plane]
                    .copy_from_slice(&gout.data()[src_base..src_base + group * plane]);
            }
            Ok(vec![Some(g)])
        }
        LayerKind::Softmax => {
            let Aux::Softmax(y) = aux else {
                return Err(Error::InvalidArgument(format!(
                    "layer {}: missing softmax trace",
                    node.name
                )));
            };
            Ok(vec![Some(ops::softmax_channels_backward_t(y, gout))])
        }
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += *b;
    }
}
