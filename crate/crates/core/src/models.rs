//! Network graphs for the classification and segmentation models, graph
//! execution and the training loop.
//!
//! A [`NetworkGraph`] is a list of typed layer nodes in topological order.
//! Every node records its per-sample output shape, checked against its
//! producers when the graph is built. Unpooling nodes carry an explicit edge
//! to the encoder max-pool whose indices they reuse.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_param_count, AttentionSpec, AttentionWeights, WEIGHT_NAMES};
use crate::autograd::{adam_step, AdamConfig, AdamState, ParamSet, Tape, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::layers::dice_coefficient;
use crate::tensor::{sigmoid, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cls,
    Seg,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Cls => "cls",
            Task::Seg => "seg",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Task::Cls),
            "seg" => Ok(Task::Seg),
            other => Err(Error::Config(format!("unknown task {other:?}, expected cls or seg"))),
        }
    }
}

/// Architecture hyper-parameters of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    /// Per-sample input extents `[channels, height, width]`.
    pub input: [usize; 3],
    /// Output channels of each stage.
    pub channels: Vec<usize>,
    /// Square attention window of each stage.
    pub windows: Vec<usize>,
    /// Labels (classification) or mask channels (segmentation).
    pub num_classes: usize,
    /// Hidden widths of the classification head.
    #[serde(default)]
    pub head: Vec<usize>,
    /// Segmentation only: an attention block between encoder and decoder.
    #[serde(default)]
    pub bottleneck: bool,
    /// Subtracted from every input value before the first layer.
    #[serde(default)]
    pub input_shift: f32,
    /// Seed of the weight initialisation.
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    /// Three stages of 8/16/32 channels, 3×3 windows, a 64-wide head and
    /// three labels on 32×32 grayscale input.
    pub fn toy_cls() -> Self {
        Self {
            task: Task::Cls,
            input: [1, 32, 32],
            channels: vec![8, 16, 32],
            windows: vec![3, 3, 3],
            num_classes: 3,
            head: vec![64],
            bottleneck: false,
            input_shift: 0.5,
            init_seed: 17,
        }
    }

    /// Two encoder stages of 8/16 channels with a bottleneck, 3×3 windows,
    /// one mask channel on 32×32 grayscale input.
    pub fn toy_seg() -> Self {
        Self {
            task: Task::Seg,
            input: [1, 32, 32],
            channels: vec![8, 16],
            windows: vec![3, 3],
            num_classes: 1,
            head: vec![],
            bottleneck: true,
            input_shift: 0.5,
            init_seed: 23,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        if self.channels.len() != self.windows.len() {
            return Err(Error::Config(format!(
                "{} stages but {} window sizes",
                self.channels.len(),
                self.windows.len()
            )));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % 2 != 0) {
            return Err(Error::Config(format!("stage channel count {c} must be even and positive")));
        }
        if !self.input_shift.is_finite() {
            return Err(Error::Config("input_shift must be finite".into()));
        }
        if self.input.contains(&0) || self.num_classes == 0 {
            return Err(Error::Config("input extents and class count must be positive".into()));
        }
        let scale = 1usize << self.channels.len();
        if !self.input[1].is_multiple_of(scale) || !self.input[2].is_multiple_of(scale) {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{} for {} pooling stages",
                self.input[1],
                self.input[2],
                self.channels.len(),
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Index of a node within its graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Attention(AttentionSpec),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    /// `pool` is the encoder max-pool whose indices are reused.
    MaxUnpool { pool: NodeId },
    /// Channel concatenation.
    Concat,
    Flatten,
    Linear { d_in: usize, d_out: usize },
    /// Per-pixel linear map over channels, with bias.
    Project { c_in: usize, c_out: usize },
    Sigmoid,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Attention(_) => "attention",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::MaxUnpool { .. } => "maxunpool",
            LayerKind::Concat => "concat",
            LayerKind::Flatten => "flatten",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Project { .. } => "project",
            LayerKind::Sigmoid => "sigmoid",
        }
    }

    /// Parameter names local to the node, in storage order.
    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            LayerKind::Attention(_) => WEIGHT_NAMES.to_vec(),
            LayerKind::Linear { .. } | LayerKind::Project { .. } => vec!["weight", "bias"],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            LayerKind::Attention(spec) => attention_param_count(spec),
            LayerKind::Linear { d_in, d_out } => (d_out * d_in + d_out) as u64,
            LayerKind::Project { c_in, c_out } => (c_out * c_in + c_out) as u64,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    /// Output extents excluding the batch axis.
    pub shape: Vec<usize>,
}

/// Attaches the node name to an error raised while executing it.
fn at_node(node: &str, e: Error) -> Error {
    match e {
        Error::Shape { op, detail } => Error::Shape {
            op: format!("node {node} ({op})"),
            detail,
        },
        Error::Numeric { site, detail } => Error::Numeric {
            site: format!("node {node} ({site})"),
            detail,
        },
        Error::Contract { op, detail } => Error::Contract {
            op: format!("node {node} ({op})"),
            detail,
        },
        other => other,
    }
}

/// Incremental, shape-checked graph construction.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<GraphNode>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<NodeId>, shape: Vec<usize>) -> Result<NodeId> {
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::Config(format!("duplicate node name {name:?}")));
        }
        self.nodes.push(GraphNode {
            name: name.to_string(),
            kind,
            inputs,
            shape,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn spatial(&self, id: NodeId, layer: &str) -> Result<[usize; 3]> {
        match *self.shape(id) {
            [c, h, w] => Ok([c, h, w]),
            ref s => Err(Error::shape(layer, format!("expected C×H×W input, got {s:?}"))),
        }
    }

    pub fn input(&mut self, shape: [usize; 3]) -> Result<NodeId> {
        self.push("input", LayerKind::Input, vec![], shape.to_vec())
    }

    pub fn attention(&mut self, name: &str, x: NodeId, spec: AttentionSpec) -> Result<NodeId> {
        spec.validate()?;
        let [c, h, w] = self.spatial(x, name)?;
        if c != spec.c_in {
            return Err(Error::shape(name, format!("input has {c} channels, layer expects {}", spec.c_in)));
        }
        self.push(name, LayerKind::Attention(spec), vec![x], vec![spec.c_out, h, w])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        self.push(name, LayerKind::Relu, vec![x], shape)
    }

    pub fn sigmoid(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        self.push(name, LayerKind::Sigmoid, vec![x], shape)
    }

    pub fn maxpool(&mut self, name: &str, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let [c, h, w] = self.spatial(x, name)?;
        let fits = |e: usize| kernel > 0 && stride > 0 && e >= kernel && (e - kernel).is_multiple_of(stride);
        if !fits(h) || !fits(w) {
            return Err(Error::shape(
                name,
                format!("{h}x{w} is not divisible into {kernel}x{kernel} windows with stride {stride}"),
            ));
        }
        let out = vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
        self.push(name, LayerKind::MaxPool { kernel, stride }, vec![x], out)
    }

    /// Unpools `x` using the indices of `pool`. The input must have the
    /// pooled shape and the output takes the shape the pool consumed.
    pub fn maxunpool(&mut self, name: &str, x: NodeId, pool: NodeId) -> Result<NodeId> {
        let pool_node = &self.nodes[pool.0];
        if !matches!(pool_node.kind, LayerKind::MaxPool { .. }) {
            return Err(Error::Config(format!("{name}: index source {} is not a max-pool", pool_node.name)));
        }
        if self.shape(x) != pool_node.shape.as_slice() {
            return Err(Error::shape(
                name,
                format!(
                    "unpool input {:?} does not match the pooled shape {:?} of {}",
                    self.shape(x),
                    pool_node.shape,
                    pool_node.name
                ),
            ));
        }
        let out = self.nodes[pool_node.inputs[0].0].shape.clone();
        self.push(name, LayerKind::MaxUnpool { pool }, vec![x, pool], out)
    }

    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.spatial(*parts.first().ok_or_else(|| Error::Config(format!("{name}: nothing to concat")))?, name)?;
        let mut c = 0;
        for &p in parts {
            let s = self.spatial(p, name)?;
            if s[1..] != first[1..] {
                return Err(Error::shape(name, format!("spatial extents {:?} vs {:?}", &s[1..], &first[1..])));
            }
            c += s[0];
        }
        self.push(name, LayerKind::Concat, parts.to_vec(), vec![c, first[1], first[2]])
    }

    pub fn flatten(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let d = self.shape(x).iter().product();
        self.push(name, LayerKind::Flatten, vec![x], vec![d])
    }

    pub fn linear(&mut self, name: &str, x: NodeId, d_out: usize) -> Result<NodeId> {
        let d_in = match *self.shape(x) {
            [d] => d,
            ref s => return Err(Error::shape(name, format!("linear needs a flat input, got {s:?}"))),
        };
        self.push(name, LayerKind::Linear { d_in, d_out }, vec![x], vec![d_out])
    }

    pub fn project(&mut self, name: &str, x: NodeId, c_out: usize) -> Result<NodeId> {
        let [c_in, h, w] = self.spatial(x, name)?;
        self.push(name, LayerKind::Project { c_in, c_out }, vec![x], vec![c_out, h, w])
    }

    pub fn finish(self, config: ModelConfig) -> Result<NetworkGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        for node in &self.nodes {
            match &node.kind {
                LayerKind::Attention(spec) => {
                    let w = AttentionWeights::<f32>::init(spec, &mut rng);
                    for (n, t) in WEIGHT_NAMES.iter().zip(w.buffers()) {
                        params.insert(format!("{}.{n}", node.name), t.clone());
                    }
                }
                LayerKind::Linear { d_in: c_in, d_out: c_out } | LayerKind::Project { c_in, c_out } => {
                    let bound = 1.0 / (*c_in as f64).sqrt();
                    let w = Tensor::from_fn(&[*c_out, *c_in], |_| {
                        use rand::Rng;
                        rng.random_range(-bound..bound) as f32
                    });
                    params.insert(format!("{}.weight", node.name), w);
                    params.insert(format!("{}.bias", node.name), Tensor::zeros(&[*c_out]));
                }
                _ => {}
            }
        }
        let graph = NetworkGraph {
            config,
            nodes: self.nodes,
            params,
        };
        graph.validate()?;
        Ok(graph)
    }
}

/// A model: layer nodes, their float32 parameters and the config that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    pub config: ModelConfig,
    nodes: Vec<GraphNode>,
    pub params: ParamSet<f32>,
}

impl NetworkGraph {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        match config.task {
            Task::Cls => build_sadnn_cls(config),
            Task::Seg => build_sadnn_seg(config),
        }
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    pub fn output(&self) -> NodeId {
        NodeId(self.nodes.len() - 1)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.nodes.len() - 1].shape
    }

    pub fn param_count(&self) -> u64 {
        self.params.values().map(|t| t.len() as u64).sum()
    }

    /// Structural invariants: topological order, matching shapes on every
    /// edge, unpool/pool pairing and a complete parameter set.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.first().map(|n| &n.kind) != Some(&LayerKind::Input) {
            return Err(Error::Config("graph must start with its input node".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.iter().any(|p| p.0 >= i) {
                return Err(Error::Config(format!("node {} consumes a later node", node.name)));
            }
            let input_shape = |k: usize| &self.nodes[node.inputs[k].0].shape;
            match &node.kind {
                LayerKind::MaxUnpool { pool } => {
                    let p = &self.nodes[pool.0];
                    if !matches!(p.kind, LayerKind::MaxPool { .. }) || node.inputs.get(1) != Some(pool) {
                        return Err(Error::Config(format!("{} lacks a pool-index edge from a max-pool", node.name)));
                    }
                    let mirror = &self.nodes[p.inputs[0].0].shape;
                    if &node.shape != mirror || input_shape(0) != &p.shape {
                        return Err(Error::shape(
                            node.name.clone(),
                            format!("unpooled shape {:?} differs from encoder shape {mirror:?}", node.shape),
                        ));
                    }
                }
                LayerKind::Attention(spec) => {
                    if input_shape(0).first() != Some(&spec.c_in) || node.shape.first() != Some(&spec.c_out) {
                        return Err(Error::shape(node.name.clone(), "attention channels do not match neighbours"));
                    }
                }
                LayerKind::Relu | LayerKind::Sigmoid
                    if input_shape(0) != &node.shape => {
                        return Err(Error::shape(node.name.clone(), "elementwise layer changes shape"));
                    }
                _ => {}
            }
            for pname in node.kind.param_names() {
                let key = format!("{}.{pname}", node.name);
                if !self.params.contains_key(&key) {
                    return Err(Error::Config(format!("missing parameter {key}")));
                }
            }
        }
        let expected: u64 = self.nodes.iter().map(|n| n.kind.param_count()).sum();
        if expected != self.param_count() {
            return Err(Error::Config(format!(
                "parameter set holds {} values, layers need {expected}",
                self.param_count()
            )));
        }
        Ok(())
    }

    /// Replaces the parameters, checking names and shapes.
    pub fn set_params(&mut self, params: ParamSet<f32>) -> Result<()> {
        let same_keys = params.keys().eq(self.params.keys());
        if !same_keys {
            return Err(Error::Config("parameter names do not match the model".into()));
        }
        for (k, v) in &params {
            if v.shape() != self.params[k].shape() {
                return Err(Error::shape("set_params", format!("{k}: {:?} vs {:?}", v.shape(), self.params[k].shape())));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Records the whole graph on `tape`. Returns the variable of every node.
    pub fn forward_on_tape<T: Float>(&self, tape: &mut Tape<T>, x: Tensor<T>, params: &BTreeMap<String, Var>) -> Result<Vec<Var>> {
        let mut expected = vec![x.shape().first().copied().unwrap_or(0)];
        expected.extend_from_slice(self.input_shape());
        if x.shape() != expected.as_slice() {
            return Err(Error::shape("forward", format!("input {:?}, graph expects {expected:?}", x.shape())));
        }
        let mut vars: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let p = |n: &str| params[&format!("{}.{n}", node.name)];
            let inp = |k: usize| vars[node.inputs[k].0];
            let v = match &node.kind {
                LayerKind::Input => {
                    let shift = T::of(self.config.input_shift as f64);
                    Ok(tape.input(x.map(|v| v - shift)))
                }
                LayerKind::Attention(spec) => tape.attention(inp(0), spec, WEIGHT_NAMES.map(p)),
                LayerKind::Relu => Ok(tape.relu(inp(0))),
                LayerKind::Sigmoid => Ok(tape.sigmoid(inp(0))),
                LayerKind::MaxPool { kernel, stride } => tape.maxpool(inp(0), *kernel, *stride),
                LayerKind::MaxUnpool { .. } => tape.maxunpool(inp(0), inp(1)),
                LayerKind::Concat => {
                    let parts: Vec<Var> = node.inputs.iter().map(|i| vars[i.0]).collect();
                    tape.concat(&parts, 1)
                }
                LayerKind::Flatten => tape.flatten(inp(0)),
                LayerKind::Linear { .. } => tape.linear(inp(0), p("weight"), p("bias")),
                LayerKind::Project { .. } => tape.project(inp(0), p("weight"), p("bias")),
            }
            .map_err(|e| at_node(&node.name, e))?;
            vars.push(v);
        }
        Ok(vars)
    }

    /// Puts every parameter on `tape`, converted to `T`.
    pub fn params_on_tape<T: Float>(&self, tape: &mut Tape<T>) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.cast())))
            .collect()
    }

    /// Runs the graph on a batch `N × input_shape`.
    pub fn forward<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.params_on_tape(&mut tape);
        let vars = self.forward_on_tape(&mut tape, x.clone(), &params)?;
        let out = tape.value(*vars.last().expect("non-empty graph")).clone();
        if !out.all_finite() {
            return Err(Error::numeric("forward", "non-finite network output"));
        }
        Ok(out)
    }

    /// Per-label probabilities (classification) or mask probabilities
    /// (segmentation) for a batch.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let out = self.forward(x)?;
        Ok(match self.config.task {
            Task::Cls => out.map(sigmoid),
            Task::Seg => out,
        })
    }
}

fn stage_spec(cfg: &ModelConfig, stage: usize, c_in: usize, c_out: usize) -> Result<AttentionSpec> {
    AttentionSpec::square(c_in, c_out, cfg.windows[stage])
}

/// Alternating attention blocks and attention-down blocks, then a linear
/// head producing one logit per label.
pub fn build_sadnn_cls(cfg: &ModelConfig) -> Result<NetworkGraph> {
    cfg.validate()?;
    if cfg.task != Task::Cls {
        return Err(Error::Config("build_sadnn_cls needs a cls config".into()));
    }
    let mut b = GraphBuilder::new();
    let mut x = b.input(cfg.input)?;
    let mut c_in = cfg.input[0];
    for (s, &c) in cfg.channels.iter().enumerate() {
        let st = s + 1;
        x = b.attention(&format!("stage{st}.attn"), x, stage_spec(cfg, s, c_in, c)?)?;
        x = b.relu(&format!("stage{st}.relu"), x)?;
        x = b.attention(&format!("stage{st}.down.attn"), x, stage_spec(cfg, s, c, c)?)?;
        x = b.relu(&format!("stage{st}.down.relu"), x)?;
        x = b.maxpool(&format!("stage{st}.down.pool"), x, 2, 2)?;
        c_in = c;
    }
    x = b.flatten("flatten", x)?;
    for (i, &w) in cfg.head.iter().enumerate() {
        x = b.linear(&format!("head{}", i + 1), x, w)?;
        x = b.relu(&format!("head{}.relu", i + 1), x)?;
    }
    b.linear("logits", x, cfg.num_classes)?;
    b.finish(cfg.clone())
}

/// Attention encoder-decoder. Each decoder stage unpools with the indices of
/// its mirror encoder pool, concatenates the mirror encoder activation and
/// applies an attention block. A per-pixel projection and a sigmoid give the
/// mask.
pub fn build_sadnn_seg(cfg: &ModelConfig) -> Result<NetworkGraph> {
    cfg.validate()?;
    if cfg.task != Task::Seg {
        return Err(Error::Config("build_sadnn_seg needs a seg config".into()));
    }
    let mut b = GraphBuilder::new();
    let mut x = b.input(cfg.input)?;
    let mut c_in = cfg.input[0];
    let mut skips = Vec::new();
    for (s, &c) in cfg.channels.iter().enumerate() {
        let st = s + 1;
        x = b.attention(&format!("enc{st}.attn"), x, stage_spec(cfg, s, c_in, c)?)?;
        x = b.relu(&format!("enc{st}.relu"), x)?;
        let skip = x;
        x = b.maxpool(&format!("enc{st}.pool"), x, 2, 2)?;
        skips.push((skip, x, c));
        c_in = c;
    }
    let deepest = cfg.channels.len() - 1;
    if cfg.bottleneck {
        x = b.attention("bottleneck.attn", x, stage_spec(cfg, deepest, c_in, c_in)?)?;
        x = b.relu("bottleneck.relu", x)?;
    }
    for s in (0..cfg.channels.len()).rev() {
        let st = s + 1;
        let (skip, pool, c) = skips[s];
        let c_out = if s == 0 { cfg.channels[0] } else { cfg.channels[s - 1] };
        x = b.maxunpool(&format!("dec{st}.unpool"), x, pool)?;
        x = b.concat(&format!("dec{st}.concat"), &[x, skip])?;
        x = b.attention(&format!("dec{st}.attn"), x, stage_spec(cfg, s, 2 * c, c_out)?)?;
        x = b.relu(&format!("dec{st}.relu"), x)?;
    }
    x = b.project("head", x, cfg.num_classes)?;
    b.sigmoid("mask", x)?;
    b.finish(cfg.clone())
}

pub(crate) fn stack<'a>(items: impl Iterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let mut shape = None;
    let mut data = Vec::new();
    let mut n = 0;
    for t in items {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::shape("batch", format!("sample {:?} vs {s:?}", t.shape())));
            }
            _ => {}
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.ok_or_else(|| Error::Empty("empty batch".into()))?);
    Tensor::new(&full, data)
}

/// Images and targets of a batch of samples.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    Ok((
        stack(samples.iter().map(|s| &s.image))?,
        stack(samples.iter().map(|s| &s.label))?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Subset accuracy (cls) or Dice coefficient (seg) of the in-epoch
    /// predictions.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    /// Parameters whose gradient was exactly zero on every batch of the
    /// first epoch.
    pub dead_params: Vec<String>,
}

/// Fraction of samples whose every label is predicted correctly at 0.5.
pub fn subset_accuracy(probs: &Tensor<f32>, targets: &Tensor<f32>) -> Result<f64> {
    probs.expect_same_shape(targets, "subset_accuracy")?;
    let n = probs.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Empty("subset accuracy of an empty batch".into()));
    }
    let l = probs.len() / n;
    let hits = (0..n)
        .filter(|&i| {
            probs.data()[i * l..(i + 1) * l]
                .iter()
                .zip(&targets.data()[i * l..(i + 1) * l])
                .all(|(&p, &t)| (p > 0.5) == (t > 0.5))
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Task metric of predicted probabilities against targets.
pub fn task_metric(task: Task, probs: &Tensor<f32>, targets: &Tensor<f32>) -> Result<f64> {
    match task {
        Task::Cls => subset_accuracy(probs, targets),
        Task::Seg => dice_coefficient(probs, targets, 0.5),
    }
}

/// Mini-batch Adam training. Batch order is shuffled per epoch from `seed`.
pub fn train(net: &mut NetworkGraph, data: &[Sample], opts: &TrainOptions) -> Result<TrainTrace> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if opts.lr.is_nan() || opts.lr <= 0.0 || opts.batch_size == 0 {
        return Err(Error::Config("learning rate and batch size must be positive".into()));
    }
    let adam = AdamConfig::with_lr(opts.lr);
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(opts.epochs);
    let mut live: BTreeSet<String> = BTreeSet::new();

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut metric_sum, mut seen) = (0.0, 0.0, 0usize);
        let batches = order.chunks(opts.batch_size).count();
        for (bi, chunk) in order.chunks(opts.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (x, y) = batch(&samples)?;
            let mut tape = Tape::new();
            let params = net.params_on_tape(&mut tape);
            let vars = net.forward_on_tape(&mut tape, x, &params)?;
            let out = *vars.last().expect("non-empty graph");
            let loss = match net.config.task {
                Task::Cls => tape.bce(out, y.clone())?,
                Task::Seg => tape.soft_dice(out, y.clone())?,
            };
            let lv = tape.value(loss).item()? as f64;
            if !lv.is_finite() {
                return Err(Error::numeric(
                    format!("training epoch {} batch {}", epoch + 1, bi + 1),
                    format!("loss is {lv}"),
                ));
            }
            let probs = match net.config.task {
                Task::Cls => tape.value(out).map(sigmoid),
                Task::Seg => tape.value(out).clone(),
            };
            metric_sum += task_metric(net.config.task, &probs, &y)? * samples.len() as f64;
            loss_sum += lv;
            seen += samples.len();

            let grads = tape.backward(loss)?;
            if epoch == 0 {
                for (k, g) in &grads.params {
                    if g.data().iter().any(|&v| v != 0.0) {
                        live.insert(k.clone());
                    }
                }
            }
            adam_step(&mut net.params, &grads, &mut state, &adam)?;
        }
        epochs.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / batches as f64,
            metric: metric_sum / seen as f64,
        });
    }
    let dead_params = if opts.epochs == 0 {
        vec![]
    } else {
        net.params.keys().filter(|k| !live.contains(*k)).cloned().collect()
    };
    Ok(TrainTrace {
        seed: opts.seed,
        epochs,
        dead_params,
    })
}

/// Task metric over a dataset, evaluated in batches.
pub fn evaluate(net: &NetworkGraph, data: &[Sample], batch_size: usize) -> Result<f64> {
    evaluate_with(net.config.task, data, batch_size, |x| net.predict(x))
}

/// Shared evaluation loop over any predictor returning probabilities.
pub fn evaluate_with(task: Task, data: &[Sample], batch_size: usize, mut predict: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut total = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = batch(&refs)?;
        total += task_metric(task, &predict(&x)?, &y)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_forward;

    fn small_cls() -> ModelConfig {
        ModelConfig {
            channels: vec![4],
            windows: vec![3],
            head: vec![],
            ..ModelConfig::toy_cls()
        }
    }

    #[test]
    fn cls_output_shape() {
        let cfg = ModelConfig {
            input: [2, 32, 32],
            channels: vec![4],
            windows: vec![3],
            head: vec![],
            ..ModelConfig::toy_cls()
        };
        let net = build_sadnn_cls(&cfg).unwrap();
        assert_eq!(net.output_shape(), &[3]);
        let y = net.forward(&Tensor::<f32>::zeros(&[2, 2, 32, 32])).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
    }

    #[test]
    fn zero_input_gives_final_bias() {
        let cfg = ModelConfig {
            input_shift: 0.0,
            ..ModelConfig::toy_cls()
        };
        let mut net = build_sadnn_cls(&cfg).unwrap();
        let bias = Tensor::new(&[3], vec![0.25f32, -1.0, 2.0]).unwrap();
        net.params.insert("logits.bias".into(), bias.clone());
        let y = net.forward(&Tensor::<f32>::zeros(&[2, 1, 32, 32])).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, bias.data());
        }
        // With a shift, the input equal to the shift is the zero signal.
        let mut net = build_sadnn_cls(&ModelConfig::toy_cls()).unwrap();
        net.params.insert("logits.bias".into(), bias.clone());
        let y = net.forward(&Tensor::full(&[1, 1, 32, 32], 0.5f32)).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn seg_shapes_and_mirror_invariant() {
        let net = build_sadnn_seg(&ModelConfig::toy_seg()).unwrap();
        assert_eq!(net.output_shape(), &[1, 32, 32]);
        for node in net.nodes() {
            if let LayerKind::MaxUnpool { pool } = node.kind {
                let mirror = net.node(net.node(pool).inputs[0]);
                assert_eq!(node.shape, mirror.shape);
            }
        }
        let y = net.forward(&Tensor::from_fn(&[2, 1, 32, 32], |i| (i % 7) as f32 / 7.0)).unwrap();
        assert_eq!(y.shape(), &[2, 1, 32, 32]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = build_sadnn_seg(&ModelConfig::toy_seg()).unwrap();
        let x = Tensor::from_fn(&[3, 1, 32, 32], |i| ((i * 37) % 101) as f32 / 101.0);
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn single_attention_graph_matches_direct_call() {
        let spec = AttentionSpec::square(2, 4, 3).unwrap();
        let mut b = GraphBuilder::new();
        let x = b.input([2, 6, 6]).unwrap();
        b.attention("a", x, spec).unwrap();
        let cfg = ModelConfig {
            input_shift: 0.0,
            ..small_cls()
        };
        let net = b.finish(cfg).unwrap();
        let w = AttentionWeights {
            w_q: net.params["a.w_q"].clone(),
            w_k: net.params["a.w_k"].clone(),
            w_v: net.params["a.w_v"].clone(),
            e_row: net.params["a.e_row"].clone(),
            e_col: net.params["a.e_col"].clone(),
        };
        let input = Tensor::from_fn(&[1, 2, 6, 6], |i| (i as f32 * 0.37).sin());
        assert_eq!(net.forward(&input).unwrap(), attention_forward(&input, &spec, &w).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let odd = ModelConfig {
            channels: vec![3],
            windows: vec![3],
            ..small_cls()
        };
        assert!(build_sadnn_cls(&odd).is_err());
        let indivisible = ModelConfig {
            input: [1, 30, 30],
            ..ModelConfig::toy_cls()
        };
        assert!(build_sadnn_cls(&indivisible).is_err());
        assert!(build_sadnn_seg(&ModelConfig::toy_cls()).is_err());
        let mismatched = ModelConfig {
            windows: vec![3],
            ..ModelConfig::toy_seg()
        };
        assert!(build_sadnn_seg(&mismatched).is_err());
    }

    #[test]
    fn unpool_with_wrong_shape_is_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.input([2, 8, 8]).unwrap();
        let p1 = b.maxpool("p1", x, 2, 2).unwrap();
        let p2 = b.maxpool("p2", p1, 2, 2).unwrap();
        // p2's output is 2x2, but p1 pooled to 4x4.
        assert!(matches!(b.maxunpool("u", p2, p1), Err(Error::Shape { .. })));
        assert!(b.maxunpool("u", p2, x).is_err());
        assert!(b.maxunpool("u", p1, p1).is_ok());
    }

    #[test]
    fn validate_catches_tampered_graph() {
        let mut net = build_sadnn_seg(&ModelConfig::toy_seg()).unwrap();
        let idx = net.nodes.iter().position(|n| matches!(n.kind, LayerKind::MaxUnpool { .. })).unwrap();
        net.nodes[idx].shape[1] += 2;
        assert!(net.validate().is_err());

        let mut net = build_sadnn_cls(&ModelConfig::toy_cls()).unwrap();
        net.params.remove("logits.bias");
        assert!(net.validate().is_err());
    }

    #[test]
    fn config_toml_roundtrip() {
        for cfg in [ModelConfig::toy_cls(), ModelConfig::toy_seg()] {
            assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
        assert!(ModelConfig::from_toml("task = \"cls\"\nbogus = 1").is_err());
    }

    #[test]
    fn forward_reports_node_on_shape_error() {
        let net = build_sadnn_cls(&ModelConfig::toy_cls()).unwrap();
        match net.forward(&Tensor::<f32>::zeros(&[1, 1, 16, 16])) {
            Err(Error::Shape { op, .. }) => assert!(op.contains("forward")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_epochs_leave_params() {
        let mut net = build_sadnn_cls(&small_cls()).unwrap();
        let before = net.params.clone();
        let data = vec![Sample {
            image: Tensor::zeros(&[1, 32, 32]),
            label: Tensor::zeros(&[3]),
        }];
        let opts = TrainOptions {
            epochs: 0,
            lr: 1e-3,
            batch_size: 4,
            seed: 1,
        };
        let trace = train(&mut net, &data, &opts).unwrap();
        assert!(trace.epochs.is_empty());
        assert_eq!(net.params, before);
        assert!(train(&mut net, &[], &opts).is_err());
    }
}
