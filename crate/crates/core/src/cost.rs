//! Static cost model: parameters, multiply/add counts, model size and
//! energy for model graphs and for declarative layer specs.
//!
//! Declarative specs are line-oriented text, one layer per line:
//!
//! ```text
//! input shape=3x224x224
//! conv2d name=conv1 out=64 kernel=7 stride=2 padding=3 bias=false
//! relu
//! add from=conv1,relu1
//! ```
//!
//! The grammar is documented in `docs/spec-format.md`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::attention::{attention_op_count, attention_param_count, AttentionSpec};
use crate::error::{Error, Result};
use crate::models::{LayerKind, NetworkGraph};

/// Scalar multiply and add counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpTally {
    pub mul: u64,
    pub add: u64,
}

impl OpTally {
    pub const ZERO: OpTally = OpTally { mul: 0, add: 0 };

    /// `mul + add`, the combined column of the published tables.
    pub fn total(&self) -> u64 {
        self.mul + self.add
    }
}

impl Add for OpTally {
    type Output = OpTally;
    fn add(self, o: OpTally) -> OpTally {
        OpTally {
            mul: self.mul + o.mul,
            add: self.add + o.add,
        }
    }
}

impl AddAssign for OpTally {
    fn add_assign(&mut self, o: OpTally) {
        *self = *self + o;
    }
}

impl std::iter::Sum for OpTally {
    fn sum<I: Iterator<Item = OpTally>>(iter: I) -> OpTally {
        iter.fold(OpTally::ZERO, Add::add)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Int8,
    Fp16,
    Fp32,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::Int8, Precision::Fp16, Precision::Fp32];

    pub fn bytes(self) -> u64 {
        match self {
            Precision::Int8 => 1,
            Precision::Fp16 => 2,
            Precision::Fp32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Int8 => "int8",
            Precision::Fp16 => "fp16",
            Precision::Fp32 => "fp32",
        }
    }
}

/// Energy of one scalar operation, in picojoules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpEnergy {
    pub mul_pj: f64,
    pub add_pj: f64,
}

/// Per-precision operation energies. Defaults are the 45 nm, 0.9 V
/// figures: int8 0.2/0.03 pJ, fp16 1.1/0.40 pJ, fp32 3.7/0.90 pJ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyTable {
    pub int8: OpEnergy,
    pub fp16: OpEnergy,
    pub fp32: OpEnergy,
}

impl Default for EnergyTable {
    fn default() -> Self {
        Self {
            int8: OpEnergy { mul_pj: 0.2, add_pj: 0.03 },
            fp16: OpEnergy { mul_pj: 1.1, add_pj: 0.40 },
            fp32: OpEnergy { mul_pj: 3.7, add_pj: 0.90 },
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnergyOverride {
    int8: Option<OpEnergy>,
    fp16: Option<OpEnergy>,
    fp32: Option<OpEnergy>,
}

impl EnergyTable {
    pub fn get(&self, p: Precision) -> OpEnergy {
        match p {
            Precision::Int8 => self.int8,
            Precision::Fp16 => self.fp16,
            Precision::Fp32 => self.fp32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in Precision::ALL {
            let e = self.get(p);
            if !(e.mul_pj > 0.0 && e.add_pj > 0.0 && e.mul_pj.is_finite() && e.add_pj.is_finite()) {
                return Err(Error::Config(format!("{} energies must be positive, got {:?}", p.name(), e)));
            }
        }
        Ok(())
    }

    /// Defaults with any precisions present in the TOML text replaced.
    pub fn from_toml(text: &str) -> Result<Self> {
        let o: EnergyOverride = toml::from_str(text).map_err(|e| Error::Config(format!("energy table: {e}")))?;
        let mut t = Self::default();
        if let Some(e) = o.int8 {
            t.int8 = e;
        }
        if let Some(e) = o.fp16 {
            t.fp16 = e;
        }
        if let Some(e) = o.fp32 {
            t.fp32 = e;
        }
        t.validate()?;
        Ok(t)
    }
}

/// `mul·e_mul + add·e_add` in joules.
pub fn estimate_energy(ops: &OpTally, table: &EnergyTable, precision: Precision) -> f64 {
    let e = table.get(precision);
    (ops.mul as f64 * e.mul_pj + ops.add as f64 * e.add_pj) * 1e-12
}

/// Energy for a combined mul+add count split evenly between the two.
pub fn energy_from_total(total_ops: f64, table: &EnergyTable, precision: Precision) -> f64 {
    let e = table.get(precision);
    total_ops / 2.0 * (e.mul_pj + e.add_pj) * 1e-12
}

/// Fixed archive header: magic, version and record count.
pub const ARCHIVE_HEADER_BYTES: u64 = 10;

/// Payload bytes of `params` values plus container overhead.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeEstimate {
    pub payload_bytes: u64,
    pub overhead_bytes: u64,
}

impl SizeEstimate {
    pub fn total(&self) -> u64 {
        self.payload_bytes + self.overhead_bytes
    }
}

pub fn model_size(params: u64, precision: Precision) -> SizeEstimate {
    SizeEstimate {
        payload_bytes: params * precision.bytes(),
        overhead_bytes: ARCHIVE_HEADER_BYTES,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

/// One declared layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeclKind {
    Conv2d {
        out: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Upconv2d {
        out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    Linear {
        out: usize,
        bias: bool,
    },
    Attention {
        out: usize,
        window: [usize; 2],
    },
    Pool {
        mode: PoolMode,
        kernel: usize,
        stride: usize,
        padding: usize,
        global: bool,
    },
    Unpool {
        scale: usize,
    },
    Relu,
    Sigmoid,
    Batchnorm,
    Flatten,
    Add,
    Concat,
}

impl DeclKind {
    pub fn tag(&self) -> &'static str {
        match self {
            DeclKind::Conv2d { .. } => "conv2d",
            DeclKind::Upconv2d { .. } => "upconv2d",
            DeclKind::Linear { .. } => "linear",
            DeclKind::Attention { .. } => "attention",
            DeclKind::Pool { .. } => "pool",
            DeclKind::Unpool { .. } => "unpool",
            DeclKind::Relu => "relu",
            DeclKind::Sigmoid => "sigmoid",
            DeclKind::Batchnorm => "batchnorm",
            DeclKind::Flatten => "flatten",
            DeclKind::Add => "add",
            DeclKind::Concat => "concat",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDecl {
    pub name: String,
    pub kind: DeclKind,
    /// Producer names; empty means the previous layer (or the input).
    pub from: Vec<String>,
    /// Source line, 0 for layers not read from text.
    pub line: usize,
}

/// A parsed declarative network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-sample input extents, when the spec declares them.
    pub input: Option<Vec<usize>>,
    pub layers: Vec<LayerDecl>,
}

struct Fields<'a> {
    line: usize,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        self.map.remove(key)
    }

    fn usize_or(&mut self, key: &str, default: Option<usize>) -> Result<usize> {
        match self.take(key) {
            Some(v) => v.parse().map_err(|_| self.err(format!("{key}={v} is not a non-negative integer"))),
            None => default.ok_or_else(|| self.err(format!("missing required field {key}"))),
        }
    }

    fn positive(&mut self, key: &str, default: Option<usize>) -> Result<usize> {
        let v = self.usize_or(key, default)?;
        if v == 0 {
            return Err(self.err(format!("{key} must be positive")));
        }
        Ok(v)
    }

    fn pair(&mut self, key: &str) -> Result<[usize; 2]> {
        let v = self.take(key).ok_or_else(|| self.err(format!("missing required field {key}")))?;
        let dims = parse_dims(v).ok_or_else(|| self.err(format!("{key}={v} is not N or NxM")))?;
        match dims.as_slice() {
            [a] if *a > 0 => Ok([*a, *a]),
            [a, b] if *a > 0 && *b > 0 => Ok([*a, *b]),
            _ => Err(self.err(format!("{key}={v} must be one or two positive extents"))),
        }
    }

    fn flag(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(self.err(format!("{key}={v} is not true or false"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(k) => Err(self.err(format!("unknown field {k}"))),
        }
    }
}

fn parse_dims(v: &str) -> Option<Vec<usize>> {
    v.split('x').map(|d| d.parse().ok()).collect()
}

/// Parses a declarative spec. Errors carry the 1-based line number.
pub fn parse_spec(text: &str) -> Result<NetworkSpec> {
    let mut spec = NetworkSpec::default();
    let mut names: HashMap<String, usize> = HashMap::new();
    names.insert("input".into(), 0);
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split_whitespace();
        let kind = parts.next().expect("non-empty line");
        let mut fields = Fields {
            line,
            map: BTreeMap::new(),
        };
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| fields.err(format!("expected key=value, got {p:?}")))?;
            if k.is_empty() || v.is_empty() {
                return Err(fields.err(format!("empty key or value in {p:?}")));
            }
            if fields.map.insert(k, v).is_some() {
                return Err(fields.err(format!("field {k} given twice")));
            }
        }
        if kind == "input" {
            if spec.input.is_some() || !spec.layers.is_empty() {
                return Err(fields.err("input must be declared once, before any layer"));
            }
            let v = fields.take("shape").ok_or_else(|| fields.err("missing required field shape"))?;
            let dims = parse_dims(v)
                .filter(|d| !d.is_empty() && d.iter().all(|&x| x > 0))
                .ok_or_else(|| fields.err(format!("shape={v} is not a list of positive extents like 3x224x224")))?;
            fields.finish()?;
            spec.input = Some(dims);
            continue;
        }
        let name = fields
            .take("name")
            .map(str::to_string)
            .unwrap_or_else(|| format!("{kind}{}", spec.layers.len() + 1));
        let from: Vec<String> = match fields.take("from") {
            Some(v) => v.split(',').map(str::to_string).collect(),
            None => vec![],
        };
        for f in &from {
            if !names.contains_key(f) {
                return Err(fields.err(format!("from={f} does not name an earlier layer")));
            }
        }
        let kind = match kind {
            "conv2d" => {
                let out = fields.positive("out", None)?;
                let kernel = fields.pair("kernel")?;
                let stride = fields.positive("stride", Some(1))?;
                let padding = fields.usize_or("padding", Some(0))?;
                let bias = fields.flag("bias", true)?;
                DeclKind::Conv2d {
                    out,
                    kernel,
                    stride,
                    padding,
                    bias,
                }
            }
            "upconv2d" => {
                let out = fields.positive("out", None)?;
                let kernel = fields.positive("kernel", None)?;
                let stride = fields.positive("stride", Some(kernel))?;
                let bias = fields.flag("bias", true)?;
                DeclKind::Upconv2d { out, kernel, stride, bias }
            }
            "linear" => {
                let out = fields.positive("out", None)?;
                let bias = fields.flag("bias", true)?;
                DeclKind::Linear { out, bias }
            }
            "attention" => {
                let out = fields.positive("out", None)?;
                let window = fields.pair("window")?;
                DeclKind::Attention { out, window }
            }
            "pool" => {
                let mode = match fields.take("mode").unwrap_or("max") {
                    "max" => PoolMode::Max,
                    "avg" => PoolMode::Avg,
                    m => return Err(fields.err(format!("mode={m} is not max or avg"))),
                };
                let global = fields.flag("global", false)?;
                let kernel = fields.positive("kernel", if global { Some(1) } else { None })?;
                let stride = fields.positive("stride", Some(kernel))?;
                let padding = fields.usize_or("padding", Some(0))?;
                DeclKind::Pool {
                    mode,
                    kernel,
                    stride,
                    padding,
                    global,
                }
            }
            "unpool" => DeclKind::Unpool {
                scale: fields.positive("scale", Some(2))?,
            },
            "relu" => DeclKind::Relu,
            "sigmoid" => DeclKind::Sigmoid,
            "batchnorm" => DeclKind::Batchnorm,
            "flatten" => DeclKind::Flatten,
            "add" => DeclKind::Add,
            "concat" => DeclKind::Concat,
            other => return Err(fields.err(format!("unknown layer kind {other:?}"))),
        };
        if matches!(kind, DeclKind::Add | DeclKind::Concat) && from.len() < 2 {
            return Err(fields.err(format!("{} needs at least two from= inputs", kind.tag())));
        }
        if !matches!(kind, DeclKind::Add | DeclKind::Concat) && from.len() > 1 {
            return Err(fields.err(format!("{} takes a single input", kind.tag())));
        }
        fields.finish()?;
        if names.insert(name.clone(), line).is_some() {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate layer name {name:?}"),
            });
        }
        spec.layers.push(LayerDecl { name, kind, from, line });
    }
    Ok(spec)
}

/// Cost of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub ops_mul: u64,
    pub ops_add: u64,
    /// Multiply/adds the layer performs but the counting convention leaves
    /// out of the totals (attention Q/K/V projections).
    pub excluded_mul: u64,
    pub excluded_add: u64,
    pub out_shape: Vec<usize>,
}

impl LayerCost {
    pub fn ops(&self) -> OpTally {
        OpTally {
            mul: self.ops_mul,
            add: self.ops_add,
        }
    }
}

/// Mul/add totals with their per-layer breakdown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpsCount {
    pub mul: u64,
    pub add: u64,
    pub layers: Vec<LayerCost>,
}

impl OpsCount {
    pub fn tally(&self) -> OpTally {
        OpTally {
            mul: self.mul,
            add: self.add,
        }
    }
}

fn layer_err(d: &LayerDecl, detail: impl Into<String>) -> Error {
    let op = if d.line > 0 {
        format!("layer {} (line {})", d.name, d.line)
    } else {
        format!("layer {}", d.name)
    };
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

fn dense_ops(outputs: u64, fan_in: u64, bias: bool) -> OpTally {
    let mul = outputs * fan_in;
    OpTally {
        mul,
        add: mul - outputs + if bias { outputs } else { 0 },
    }
}

fn window_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Shape inference plus per-layer costs over a declarative spec.
pub fn analyze_spec(spec: &NetworkSpec, input: &[usize]) -> Result<Vec<LayerCost>> {
    if input.is_empty() || input.contains(&0) {
        return Err(Error::shape("analyze", format!("input shape {input:?}")));
    }
    let mut shapes: HashMap<&str, Vec<usize>> = HashMap::new();
    shapes.insert("input", input.to_vec());
    let mut prev: Vec<usize> = input.to_vec();
    let mut out = Vec::with_capacity(spec.layers.len());
    for d in &spec.layers {
        let inputs: Vec<Vec<usize>> = if d.from.is_empty() {
            vec![prev.clone()]
        } else {
            d.from
                .iter()
                .map(|f| shapes.get(f.as_str()).cloned().ok_or_else(|| layer_err(d, format!("unknown producer {f}"))))
                .collect::<Result<_>>()?
        };
        let x = &inputs[0];
        let chw = || -> Result<(usize, usize, usize)> {
            match x.as_slice() {
                &[c, h, w] => Ok((c, h, w)),
                s => Err(layer_err(d, format!("{} needs a CxHxW input, got {s:?}", d.kind.tag()))),
            }
        };
        let mut params = 0u64;
        let mut ops = OpTally::ZERO;
        let mut excluded = OpTally::ZERO;
        let shape: Vec<usize> = match &d.kind {
            DeclKind::Conv2d {
                out: co,
                kernel,
                stride,
                padding,
                bias,
            } => {
                let (c, h, w) = chw()?;
                let oh = window_out(h, kernel[0], *stride, *padding);
                let ow = window_out(w, kernel[1], *stride, *padding);
                let (Some(oh), Some(ow)) = (oh, ow) else {
                    return Err(layer_err(d, format!("kernel {kernel:?} larger than padded {h}x{w}")));
                };
                let fan_in = (c * kernel[0] * kernel[1]) as u64;
                params = *co as u64 * fan_in + if *bias { *co as u64 } else { 0 };
                ops = dense_ops((co * oh * ow) as u64, fan_in, *bias);
                vec![*co, oh, ow]
            }
            DeclKind::Upconv2d { out: co, kernel, stride, bias } => {
                let (c, h, w) = chw()?;
                let (oh, ow) = ((h - 1) * stride + kernel, (w - 1) * stride + kernel);
                params = (c * co * kernel * kernel) as u64 + if *bias { *co as u64 } else { 0 };
                let mul = (c * h * w * co * kernel * kernel) as u64;
                let outputs = (co * oh * ow) as u64;
                ops = OpTally {
                    mul,
                    add: mul.saturating_sub(outputs) + if *bias { outputs } else { 0 },
                };
                vec![*co, oh, ow]
            }
            DeclKind::Linear { out: o, bias } => {
                let d_in = match x.as_slice() {
                    &[n] => n,
                    s => return Err(layer_err(d, format!("linear needs a flat input, got {s:?}; add a flatten layer"))),
                };
                params = (*o * d_in) as u64 + if *bias { *o as u64 } else { 0 };
                ops = dense_ops(*o as u64, d_in as u64, *bias);
                vec![*o]
            }
            DeclKind::Attention { out: co, window } => {
                let (c, h, w) = chw()?;
                let spec = AttentionSpec::new(c, *co, window[0], window[1]).map_err(|e| layer_err(d, e.to_string()))?;
                params = attention_param_count(&spec);
                ops = attention_op_count(&spec, h, w).total;
                excluded = dense_ops((3 * co * h * w) as u64, c as u64, false);
                vec![*co, h, w]
            }
            DeclKind::Pool {
                kernel,
                stride,
                padding,
                global,
                ..
            } => {
                let (c, h, w) = chw()?;
                if *global {
                    vec![c, 1, 1]
                } else {
                    match (window_out(h, *kernel, *stride, *padding), window_out(w, *kernel, *stride, *padding)) {
                        (Some(oh), Some(ow)) => vec![c, oh, ow],
                        _ => return Err(layer_err(d, format!("pool window {kernel} larger than {h}x{w}"))),
                    }
                }
            }
            DeclKind::Unpool { scale } => {
                let (c, h, w) = chw()?;
                vec![c, h * scale, w * scale]
            }
            DeclKind::Relu | DeclKind::Sigmoid => x.clone(),
            DeclKind::Batchnorm => {
                let (c, _, _) = chw()?;
                params = 2 * c as u64;
                x.clone()
            }
            DeclKind::Flatten => vec![x.iter().product()],
            DeclKind::Add => {
                if let Some(s) = inputs.iter().find(|s| *s != x) {
                    return Err(layer_err(d, format!("add of {x:?} and {s:?}")));
                }
                x.clone()
            }
            DeclKind::Concat => {
                let (_, h, w) = chw()?;
                let mut c = 0;
                for s in &inputs {
                    match s.as_slice() {
                        &[sc, sh, sw] if sh == h && sw == w => c += sc,
                        s => return Err(layer_err(d, format!("concat of {x:?} and {s:?}"))),
                    }
                }
                vec![c, h, w]
            }
        };
        out.push(LayerCost {
            name: d.name.clone(),
            kind: d.kind.tag().into(),
            params,
            ops_mul: ops.mul,
            ops_add: ops.add,
            excluded_mul: excluded.mul,
            excluded_add: excluded.add,
            out_shape: shape.clone(),
        });
        shapes.insert(d.name.as_str(), shape.clone());
        prev = shape;
    }
    Ok(out)
}

/// The declarative form of a model graph.
pub fn spec_of_graph(net: &NetworkGraph) -> NetworkSpec {
    let mut layers = Vec::new();
    for node in net.nodes() {
        let from: Vec<String> = node
            .inputs
            .iter()
            .take(if matches!(node.kind, LayerKind::MaxUnpool { .. }) { 1 } else { usize::MAX })
            .map(|&i| net.node(i).name.clone())
            .collect();
        let kind = match &node.kind {
            LayerKind::Input => continue,
            LayerKind::Attention(s) => DeclKind::Attention {
                out: s.c_out,
                window: [s.window_h, s.window_w],
            },
            LayerKind::Relu => DeclKind::Relu,
            LayerKind::Sigmoid => DeclKind::Sigmoid,
            LayerKind::MaxPool { kernel, stride } => DeclKind::Pool {
                mode: PoolMode::Max,
                kernel: *kernel,
                stride: *stride,
                padding: 0,
                global: false,
            },
            LayerKind::MaxUnpool { pool } => {
                let LayerKind::MaxPool { stride, .. } = net.node(*pool).kind else {
                    unreachable!("validated graph");
                };
                DeclKind::Unpool { scale: stride }
            }
            LayerKind::Concat => DeclKind::Concat,
            LayerKind::Flatten => DeclKind::Flatten,
            LayerKind::Linear { d_out, .. } => DeclKind::Linear { out: *d_out, bias: true },
            LayerKind::Project { c_out, .. } => DeclKind::Conv2d {
                out: *c_out,
                kernel: [1, 1],
                stride: 1,
                padding: 0,
                bias: true,
            },
        };
        layers.push(LayerDecl {
            name: node.name.clone(),
            kind,
            from,
            line: 0,
        });
    }
    NetworkSpec {
        input: Some(net.input_shape().to_vec()),
        layers,
    }
}

pub fn count_params(layers: &[LayerCost]) -> u64 {
    layers.iter().map(|l| l.params).sum()
}

pub fn count_ops(layers: &[LayerCost]) -> OpsCount {
    let t: OpTally = layers.iter().map(LayerCost::ops).sum();
    OpsCount {
        mul: t.mul,
        add: t.add,
        layers: layers.to_vec(),
    }
}

/// Parameter count of a model graph, through the declarative analyzer.
pub fn graph_params(net: &NetworkGraph) -> Result<u64> {
    Ok(count_params(&analyze_spec(&spec_of_graph(net), net.input_shape())?))
}

/// Op counts of a model graph for one input sample.
pub fn graph_ops(net: &NetworkGraph) -> Result<OpsCount> {
    Ok(count_ops(&analyze_spec(&spec_of_graph(net), net.input_shape())?))
}

pub const CONVENTIONS: [(&str, &str); 6] = [
    ("attention_ops", "2*b^2*c multiplies and 2*b^2*c adds per output pixel with c = c_out (query-key products and value aggregation, accumulated from zero); Q/K/V projections are listed as excluded"),
    ("conv_linear_ops", "muls = outputs * fan_in; adds = muls - outputs, plus outputs when a bias is present"),
    ("elementwise_ops", "relu, sigmoid, batchnorm, pooling, unpooling, add, concat and softmax are not counted"),
    ("ops_total_paper_convention", "ops_mul + ops_add"),
    ("size", "params * bytes per element; container overhead reported separately"),
    ("energy", "ops_mul * e_mul + ops_add * e_add at the named precision"),
];

/// Full cost summary of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub params: u64,
    pub ops_mul: u64,
    pub ops_add: u64,
    pub ops_total_paper_convention: u64,
    pub size_bytes_fp32: u64,
    pub size_bytes_fp16: u64,
    pub size_bytes_int8: u64,
    pub size_overhead_bytes: u64,
    pub energy_j_fp32: f64,
    pub energy_j_fp16: f64,
    pub energy_j_int8: f64,
    pub energy_table: EnergyTable,
    pub conventions: BTreeMap<String, String>,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn new(name: &str, input_shape: &[usize], layers: Vec<LayerCost>, table: &EnergyTable, overhead_bytes: u64) -> Self {
        let params = count_params(&layers);
        let ops = count_ops(&layers);
        let t = ops.tally();
        Self {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            params,
            ops_mul: t.mul,
            ops_add: t.add,
            ops_total_paper_convention: t.total(),
            size_bytes_fp32: model_size(params, Precision::Fp32).payload_bytes,
            size_bytes_fp16: model_size(params, Precision::Fp16).payload_bytes,
            size_bytes_int8: model_size(params, Precision::Int8).payload_bytes,
            size_overhead_bytes: overhead_bytes,
            energy_j_fp32: estimate_energy(&t, table, Precision::Fp32),
            energy_j_fp16: estimate_energy(&t, table, Precision::Fp16),
            energy_j_int8: estimate_energy(&t, table, Precision::Int8),
            energy_table: *table,
            conventions: CONVENTIONS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            layers,
        }
    }

    pub fn ops(&self) -> OpTally {
        OpTally {
            mul: self.ops_mul,
            add: self.ops_add,
        }
    }

    /// Checks the arithmetic invariants between the summary fields.
    pub fn validate(&self) -> Result<()> {
        let ops = count_ops(&self.layers);
        let ok = self.params == count_params(&self.layers)
            && self.ops_mul == ops.mul
            && self.ops_add == ops.add
            && self.ops_total_paper_convention == ops.mul + ops.add
            && self.size_bytes_fp32 == 4 * self.params
            && self.size_bytes_fp16 == 2 * self.params
            && self.size_bytes_int8 == self.params;
        if !ok {
            return Err(Error::Config("cost report totals disagree with its layers".into()));
        }
        Ok(())
    }
}

/// Cost report of a declarative spec.
pub fn analyze(name: &str, spec: &NetworkSpec, input: Option<&[usize]>, table: &EnergyTable) -> Result<CostReport> {
    let input: Vec<usize> = match (input, &spec.input) {
        (Some(i), _) => i.to_vec(),
        (None, Some(i)) => i.clone(),
        (None, None) if spec.layers.is_empty() => vec![1],
        (None, None) => return Err(Error::Config("spec declares no input shape and none was given".into())),
    };
    let layers = analyze_spec(spec, &input)?;
    Ok(CostReport::new(name, &input, layers, table, ARCHIVE_HEADER_BYTES))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Human,
    Structured,
}

fn si(v: f64) -> String {
    let (div, unit) = match v.abs() {
        a if a >= 1e9 => (1e9, "G"),
        a if a >= 1e6 => (1e6, "M"),
        a if a >= 1e3 => (1e3, "K"),
        _ => (1.0, ""),
    };
    format!("{:.2}{unit}", v / div)
}

fn joules(v: f64) -> String {
    let (mul, unit) = match v.abs() {
        a if a >= 1.0 || a == 0.0 => (1.0, "J"),
        a if a >= 1e-3 => (1e3, "mJ"),
        a if a >= 1e-6 => (1e6, "uJ"),
        _ => (1e9, "nJ"),
    };
    format!("{:.4} {unit}", v * mul)
}

/// Renders a report. `paper_convention` adds the combined mul+add column
/// to the human table.
pub fn render_report(r: &CostReport, format: ReportFormat, paper_convention: bool) -> String {
    match format {
        ReportFormat::Structured => toml::to_string(r).expect("report serializes"),
        ReportFormat::Human => {
            let mut s = String::new();
            let shape: Vec<String> = r.input_shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "{} (input {})", r.name, shape.join("x"));
            let _ = write!(s, "{:<28} {:<10} {:>12} {:>14} {:>14}", "layer", "kind", "params", "mul", "add");
            if paper_convention {
                let _ = write!(s, " {:>14}", "mul+add");
            }
            s.push('\n');
            for l in &r.layers {
                let _ = write!(s, "{:<28} {:<10} {:>12} {:>14} {:>14}", l.name, l.kind, l.params, l.ops_mul, l.ops_add);
                if paper_convention {
                    let _ = write!(s, " {:>14}", l.ops_mul + l.ops_add);
                }
                s.push('\n');
            }
            let _ = writeln!(s, "params      {} ({})", r.params, si(r.params as f64));
            let _ = writeln!(s, "ops mul     {} ({})", r.ops_mul, si(r.ops_mul as f64));
            let _ = writeln!(s, "ops add     {} ({})", r.ops_add, si(r.ops_add as f64));
            if paper_convention {
                let _ = writeln!(
                    s,
                    "ops mul+add {} ({})",
                    r.ops_total_paper_convention,
                    si(r.ops_total_paper_convention as f64)
                );
            }
            let mb = |b: u64| b as f64 / 1e6;
            let _ = writeln!(
                s,
                "size        fp32 {:.2} MB, fp16 {:.2} MB, int8 {:.2} MB (+{} B container)",
                mb(r.size_bytes_fp32),
                mb(r.size_bytes_fp16),
                mb(r.size_bytes_int8),
                r.size_overhead_bytes
            );
            let _ = writeln!(
                s,
                "energy      fp32 {}, fp16 {}, int8 {}",
                joules(r.energy_j_fp32),
                joules(r.energy_j_fp16),
                joules(r.energy_j_int8)
            );
            s
        }
    }
}

/// Parses the structured rendering back into a report.
pub fn parse_report(text: &str) -> Result<CostReport> {
    let r: CostReport = toml::from_str(text).map_err(|e| Error::Config(format!("cost report: {e}")))?;
    r.validate()?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_values() {
        let t = EnergyTable::default();
        assert_eq!((t.int8.mul_pj, t.int8.add_pj), (0.2, 0.03));
        assert_eq!((t.fp16.mul_pj, t.fp16.add_pj), (1.1, 0.40));
        assert_eq!((t.fp32.mul_pj, t.fp32.add_pj), (3.7, 0.90));
        t.validate().unwrap();
    }

    #[test]
    fn table_override_and_validation() {
        let t = EnergyTable::from_toml("[fp32]\nmul_pj = 1.0\nadd_pj = 1.0\n").unwrap();
        assert_eq!(t.fp32.mul_pj, 1.0);
        assert_eq!(t.int8, EnergyTable::default().int8);
        assert!(EnergyTable::from_toml("[int8]\nmul_pj = -1.0\nadd_pj = 1.0\n").is_err());
        assert!(EnergyTable::from_toml("[int4]\nmul_pj = 1.0\nadd_pj = 1.0\n").is_err());
    }

    #[test]
    fn single_pointwise_conv() {
        for (bias, adds) in [(true, 1), (false, 0)] {
            let spec = NetworkSpec {
                input: None,
                layers: vec![LayerDecl {
                    name: "c".into(),
                    kind: DeclKind::Conv2d {
                        out: 1,
                        kernel: [1, 1],
                        stride: 1,
                        padding: 0,
                        bias,
                    },
                    from: vec![],
                    line: 0,
                }],
            };
            let l = analyze_spec(&spec, &[1, 1, 1]).unwrap();
            assert_eq!(l[0].ops(), OpTally { mul: 1, add: adds });
        }
    }

    #[test]
    fn attention_layer_ops() {
        let spec = parse_spec("attention out=4 window=3").unwrap();
        let l = analyze_spec(&spec, &[2, 5, 5]).unwrap();
        assert_eq!(l[0].ops(), OpTally { mul: 1800, add: 1800 });
        assert_eq!(l[0].params, 3 * 4 * 2 + 2 * 6);
    }

    #[test]
    fn empty_spec_is_zero() {
        let r = analyze("empty", &parse_spec("# nothing\n\n").unwrap(), None, &EnergyTable::default()).unwrap();
        assert_eq!((r.params, r.ops_mul, r.ops_add, r.size_bytes_fp32), (0, 0, 0, 0));
        assert_eq!(r.energy_j_fp32, 0.0);
        let text = render_report(&r, ReportFormat::Structured, false);
        assert_eq!(parse_report(&text).unwrap(), r);
    }

    #[test]
    fn parse_errors_carry_lines() {
        let cases = [
            ("conv2d out=4 kernel=3\nfoo out=1", 2),
            ("relu\n\nconv2d kernel=3", 3),
            ("linear out=x", 1),
            ("relu name=a\nrelu name=a", 2),
            ("add from=input", 1),
            ("relu from=nowhere", 1),
            ("pool kernel=2 mode=min", 1),
            ("relu colour=red", 1),
            ("relu\ninput shape=3x4x4", 2),
            ("conv2d out=4 kernel=3 bias=maybe", 1),
            ("relu junk", 1),
        ];
        for (text, line) in cases {
            match parse_spec(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let spec = parse_spec("input shape=3x8x8\nconv2d name=big out=4 kernel=9\n").unwrap();
        match analyze_spec(&spec, &[3, 8, 8]) {
            Err(Error::Shape { op, .. }) => assert!(op.contains("big") && op.contains("line 2")),
            other => panic!("{other:?}"),
        }
        let spec = parse_spec("linear out=3").unwrap();
        assert!(analyze_spec(&spec, &[3, 8, 8]).is_err());
    }

    #[test]
    fn residual_and_concat_shapes() {
        let text = "input shape=4x8x8\nconv2d name=a out=4 kernel=3 padding=1\nrelu name=r\nadd name=s from=a,r\nconcat name=c from=s,input\npool kernel=2\nflatten\nlinear out=2\n";
        let spec = parse_spec(text).unwrap();
        let l = analyze_spec(&spec, spec.input.as_deref().unwrap()).unwrap();
        assert_eq!(l[3].out_shape, vec![8, 8, 8]);
        assert_eq!(l.last().unwrap().out_shape, vec![2]);
        assert_eq!(count_params(&l), (4 * 4 * 9 + 4) + (2 * 128 + 2));
    }

    #[test]
    fn quantized_energy_ratio() {
        let t = EnergyTable::default();
        let ops = OpTally { mul: 1_000_000, add: 1_000_000 };
        let ratio = estimate_energy(&ops, &t, Precision::Int8) / estimate_energy(&ops, &t, Precision::Fp32);
        assert!((ratio - 0.05).abs() < 1e-12);
    }
}
