//! Post-training int8 affine quantization and integer inference.
//!
//! Real values map to integers by `r = S·(q − Z)`. Activations use the full
//! asymmetric int8 range, weights are symmetric with `Z = 0` and biases are
//! int32 at scale `S_in·S_w`. Accumulation is exact in integers and results
//! are requantized with a float64 multiplier rounded half-to-even.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{neighbour, AttentionSpec, AttentionWeights, WEIGHT_NAMES};
use crate::error::{Error, Result};
use crate::layers::{linear, maxpool2d, maxunpool2d, PoolIndices};
use crate::models::{GraphNode, LayerKind, ModelConfig, NetworkGraph};
use crate::par;
use crate::tensor::{concat, sigmoid, softmax_in_place, Shape4, Tensor};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

/// Fixed parameters of the softmax output: probabilities in [0, 1].
pub const PROB_PARAMS: QuantParams = QuantParams {
    scale: 1.0 / 255.0,
    zero_point: -128,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32) -> Result<Self> {
        let qp = Self { scale, zero_point };
        qp.validate()?;
        Ok(qp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::contract("qparams", format!("scale {} is not positive", self.scale)));
        }
        if !(QMIN..=QMAX).contains(&self.zero_point) {
            return Err(Error::contract("qparams", format!("zero point {} outside int8", self.zero_point)));
        }
        Ok(())
    }

    /// `clamp(Z + round_half_even(r/S))`.
    #[inline]
    pub fn quantize(&self, r: f64) -> i8 {
        saturate(self.zero_point as f64 + (r / self.scale).round_ties_even())
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f64 {
        self.scale * (q as i32 - self.zero_point) as f64
    }

    /// Smallest and largest real value representable without saturation.
    pub fn range(&self) -> (f64, f64) {
        (self.dequantize(QMIN as i8), self.dequantize(QMAX as i8))
    }
}

#[inline]
fn saturate(v: f64) -> i8 {
    v.clamp(QMIN as f64, QMAX as f64) as i8
}

/// Rescales an exact integer accumulator to int8.
#[inline]
pub fn requantize(acc: i64, multiplier: f64, zero_point: i32) -> i8 {
    saturate(zero_point as f64 + (acc as f64 * multiplier).round_ties_even())
}

/// Asymmetric activation parameters covering `[min, max]` widened to
/// include zero.
pub fn compute_qparams(min: f64, max: f64) -> Result<QuantParams> {
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::numeric("compute_qparams", format!("range [{min}, {max}] is not finite")));
    }
    if min > max {
        return Err(Error::contract("compute_qparams", format!("min {min} exceeds max {max}")));
    }
    let (lo, hi) = (min.min(0.0), max.max(0.0));
    if lo == hi {
        return Ok(QuantParams {
            scale: 1.0,
            zero_point: 0,
        });
    }
    let scale = (hi - lo) / 255.0;
    let zero_point = ((-lo / scale).round_ties_even() as i64 - 128).clamp(QMIN as i64, QMAX as i64) as i32;
    Ok(QuantParams { scale, zero_point })
}

/// Symmetric weight parameters: `S = max|w| / 127`, `Z = 0`.
pub fn symmetric_qparams(absmax: f64) -> Result<QuantParams> {
    if !absmax.is_finite() {
        return Err(Error::numeric("symmetric_qparams", format!("absmax {absmax}")));
    }
    let absmax = absmax.abs();
    Ok(QuantParams {
        scale: if absmax == 0.0 { 1.0 } else { absmax / 127.0 },
        zero_point: 0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub data: Tensor<i8>,
    pub qparams: QuantParams,
}

impl QuantizedTensor {
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

pub fn quantize_tensor(t: &Tensor<f32>, qp: QuantParams) -> QuantizedTensor {
    QuantizedTensor {
        data: t.map(|r| qp.quantize(r as f64)),
        qparams: qp,
    }
}

pub fn dequantize(qt: &QuantizedTensor) -> Tensor<f32> {
    let qp = qt.qparams;
    qt.data.map(|q| qp.dequantize(q) as f32)
}

/// Quantizes a weight tensor symmetrically.
pub fn quantize_weight(t: &Tensor<f32>) -> Result<QuantizedTensor> {
    let absmax = t.data().iter().fold(0f64, |m, &v| m.max((v as f64).abs()));
    Ok(quantize_tensor(t, symmetric_qparams(absmax)?))
}

/// Integer GEMM over `m×k` by `k×n` (or `n×k` when `b_t`), accumulating
/// `(a − Z_a)(b − Z_b)` plus `bias` exactly, then requantizing.
#[allow(clippy::too_many_arguments)]
fn qgemm(
    a: &[i8],
    za: i32,
    b: &[i8],
    zb: i32,
    (m, k, n): (usize, usize, usize),
    b_t: bool,
    bias: Option<&[i32]>,
    multiplier: f64,
    z_out: i32,
) -> Result<Vec<i8>> {
    let mut out = vec![0i8; m * n];
    let overflow = std::sync::atomic::AtomicBool::new(false);
    par::for_each_chunk_mut(&mut out, n.max(1), |i, row| {
        for (j, o) in row.iter_mut().enumerate() {
            let mut acc: i64 = bias.map_or(0, |bb| bb[j] as i64);
            for p in 0..k {
                let bv = if b_t { b[j * k + p] } else { b[p * n + j] };
                acc += (a[i * k + p] as i64 - za as i64) * (bv as i64 - zb as i64);
            }
            if acc > i32::MAX as i64 || acc < i32::MIN as i64 {
                overflow.store(true, std::sync::atomic::Ordering::Relaxed);
            }
            *o = requantize(acc, multiplier, z_out);
        }
    });
    if overflow.into_inner() {
        return Err(Error::numeric("quantized_matmul", "int32 accumulator overflow"));
    }
    Ok(out)
}

/// `a (m×k) · b (k×n) + bias` with int32 accumulation, requantized to
/// `out_qp`. The bias must be quantized at scale `S_a·S_b`, zero point 0.
pub fn quantized_matmul(a: &QuantizedTensor, b: &QuantizedTensor, bias: Option<&Tensor<i32>>, out_qp: QuantParams) -> Result<QuantizedTensor> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        ref s => return Err(Error::shape("quantized_matmul", format!("lhs must be rank 2, got {s:?}"))),
    };
    let n = match *b.shape() {
        [kb, n] if kb == k => n,
        ref s => return Err(Error::shape("quantized_matmul", format!("{m}x{k} times {s:?}"))),
    };
    if let Some(bias) = bias {
        if bias.shape() != [n] {
            return Err(Error::shape("quantized_matmul", format!("bias {:?}, expected [{n}]", bias.shape())));
        }
    }
    out_qp.validate()?;
    let mult = a.qparams.scale * b.qparams.scale / out_qp.scale;
    let data = qgemm(
        a.data.data(),
        a.qparams.zero_point,
        b.data.data(),
        b.qparams.zero_point,
        (m, k, n),
        false,
        bias.map(|t| t.data()),
        mult,
        out_qp.zero_point,
    )?;
    Ok(QuantizedTensor {
        data: Tensor::new(&[m, n], data)?,
        qparams: out_qp,
    })
}

/// Requantizes `q` from `from` to `to`.
pub fn requantize_tensor(q: &QuantizedTensor, to: QuantParams) -> QuantizedTensor {
    if q.qparams == to {
        return q.clone();
    }
    let m = q.qparams.scale / to.scale;
    let z = q.qparams.zero_point as i64;
    QuantizedTensor {
        data: q.data.map(|v| requantize(v as i64 - z, m, to.zero_point)),
        qparams: to,
    }
}

/// Running per-site `[min, max]` of float activations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub sites: BTreeMap<String, (f64, f64)>,
}

impl CalibrationStats {
    pub fn observe(&mut self, site: &str, values: &[f32]) -> Result<()> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in values {
            if !v.is_finite() {
                return Err(Error::numeric(format!("calibration site {site}"), "non-finite activation"));
            }
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
        if values.is_empty() {
            return Ok(());
        }
        let e = self.sites.entry(site.to_string()).or_insert((lo, hi));
        e.0 = e.0.min(lo);
        e.1 = e.1.max(hi);
        Ok(())
    }

    /// Site-wise union of two observations.
    pub fn merge(&mut self, other: &CalibrationStats) {
        for (k, &(lo, hi)) in &other.sites {
            let e = self.sites.entry(k.clone()).or_insert((lo, hi));
            e.0 = e.0.min(lo);
            e.1 = e.1.max(hi);
        }
    }
}

pub fn out_site(node: &str) -> String {
    format!("{node}/out")
}

pub const INPUT_SITE: &str = "input";

/// Names of the calibrated sites an attention node owns.
pub fn attention_sites(node: &str) -> [String; 5] {
    ["q", "k", "v", "logits", "out"].map(|s| format!("{node}/{s}"))
}

fn attention_weights(net: &NetworkGraph, node: &str) -> AttentionWeights<f32> {
    let p = |n: &str| net.params[&format!("{node}.{n}")].clone();
    AttentionWeights {
        w_q: p("w_q"),
        w_k: p("w_k"),
        w_v: p("w_v"),
        e_row: p("e_row"),
        e_col: p("e_col"),
    }
}

fn project_f32(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = Shape4::of(x)?;
    let pixels = Tensor::new(&[s.n * s.h * s.w, s.c], crate::attention::to_pixels(x))?;
    let out = linear(&pixels, w, b)?;
    let c = out.dim(1);
    Ok(crate::attention::from_pixels(out.data(), Shape4 { c, ..s }))
}

/// Float forward pass that reports every quantization site to `observe`.
fn forward_observed(net: &NetworkGraph, x: &Tensor<f32>, observe: &mut dyn FnMut(&str, &[f32]) -> Result<()>) -> Result<Tensor<f32>> {
    let mut vals: Vec<Tensor<f32>> = Vec::with_capacity(net.nodes().len());
    let mut pools: BTreeMap<usize, PoolIndices> = BTreeMap::new();
    let shift = net.config.input_shift;
    let x = &x.map(|v| v - shift);
    observe(INPUT_SITE, x.data())?;
    for (id, node) in net.nodes().iter().enumerate() {
        let inp = |k: usize| &vals[node.inputs[k].0];
        let p = |n: &str| &net.params[&format!("{}.{n}", node.name)];
        let v = match &node.kind {
            LayerKind::Input => x.clone(),
            LayerKind::Attention(spec) => {
                let w = attention_weights(net, &node.name);
                let (y, cache) = crate::attention::attention_forward_cached(inp(0), spec, &w)?;
                let [q, k, v] = cache.projections();
                let sites = attention_sites(&node.name);
                observe(&sites[0], q)?;
                observe(&sites[1], k)?;
                observe(&sites[2], v)?;
                observe(&sites[3], &cache.logits(spec, &w))?;
                observe(&sites[4], y.data())?;
                y
            }
            LayerKind::Relu => inp(0).map(|v| v.max(0.0)),
            LayerKind::Sigmoid => inp(0).map(sigmoid),
            LayerKind::MaxPool { kernel, stride } => {
                let (y, idx) = maxpool2d(inp(0), *kernel, *stride)?;
                pools.insert(id, idx);
                y
            }
            LayerKind::MaxUnpool { pool } => {
                let idx = &pools[&pool.0];
                maxunpool2d(inp(0), idx, idx.input)?
            }
            LayerKind::Concat => {
                let parts: Vec<&Tensor<f32>> = node.inputs.iter().map(|i| &vals[i.0]).collect();
                let y = concat(&parts, 1)?;
                observe(&out_site(&node.name), y.data())?;
                y
            }
            LayerKind::Flatten => {
                let n = inp(0).dim(0);
                inp(0).reshape(&[n, inp(0).len() / n])?
            }
            LayerKind::Linear { .. } => {
                let y = linear(inp(0), p("weight"), p("bias"))?;
                observe(&out_site(&node.name), y.data())?;
                y
            }
            LayerKind::Project { .. } => {
                let y = project_f32(inp(0), p("weight"), p("bias"))?;
                observe(&out_site(&node.name), y.data())?;
                y
            }
        };
        vals.push(v);
    }
    Ok(vals.pop().expect("non-empty graph"))
}

/// Min/max of every activation site over `batches`.
pub fn calibrate<'a>(net: &NetworkGraph, batches: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<CalibrationStats> {
    let mut stats = CalibrationStats::default();
    let mut any = false;
    for x in batches {
        any = true;
        forward_observed(net, x, &mut |site, v| stats.observe(site, v))?;
    }
    if !any {
        return Err(Error::Empty("calibration data".into()));
    }
    Ok(stats)
}

/// Calibrates on the images of `samples` in batches of `batch_size`.
pub fn calibrate_samples(net: &NetworkGraph, samples: &[crate::data::Sample], batch_size: usize) -> Result<CalibrationStats> {
    let batches: Vec<Tensor<f32>> = samples
        .chunks(batch_size.max(1))
        .map(|c| crate::models::batch(&c.iter().collect::<Vec<_>>()).map(|(x, _)| x))
        .collect::<Result<_>>()?;
    calibrate(net, &batches)
}

/// Fraction of activations of `x` inside the representable range of the
/// calibrated sites.
pub fn site_coverage(net: &NetworkGraph, stats: &CalibrationStats, x: &Tensor<f32>) -> Result<f64> {
    let mut inside = 0usize;
    let mut total = 0usize;
    forward_observed(net, x, &mut |site, v| {
        let &(lo, hi) = stats
            .sites
            .get(site)
            .ok_or_else(|| Error::Config(format!("no calibration data for site {site}")))?;
        total += v.len();
        inside += v.iter().filter(|&&a| (lo..=hi).contains(&(a as f64))).count();
        Ok(())
    })?;
    Ok(inside as f64 / total.max(1) as f64)
}

/// An int8 weight with its symmetric scale, or an int32 bias.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBias {
    pub data: Tensor<i32>,
    pub scale: f64,
}

/// A network with int8 weights, int32 biases and per-site activation
/// parameters, executed with integer kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedNetwork {
    pub config: ModelConfig,
    nodes: Vec<GraphNode>,
    pub weights: BTreeMap<String, QuantizedTensor>,
    pub biases: BTreeMap<String, QuantizedBias>,
    pub sites: BTreeMap<String, QuantParams>,
}

/// Output parameters of every node, following pass-through layers back to
/// the site that produced their values.
fn node_params(nodes: &[GraphNode], sites: &BTreeMap<String, QuantParams>) -> Result<Vec<Option<QuantParams>>> {
    let mut out: Vec<Option<QuantParams>> = Vec::with_capacity(nodes.len());
    for node in nodes {
        let site = |name: String| sites.get(&name).copied().ok_or_else(|| Error::Config(format!("missing quantization site {name}")));
        let qp = match &node.kind {
            LayerKind::Input => Some(site(INPUT_SITE.into())?),
            LayerKind::Attention(_) => {
                for s in attention_sites(&node.name) {
                    site(s)?;
                }
                Some(site(out_site(&node.name))?)
            }
            LayerKind::Concat | LayerKind::Linear { .. } | LayerKind::Project { .. } => Some(site(out_site(&node.name))?),
            LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::MaxUnpool { .. } | LayerKind::Flatten => out[node.inputs[0].0],
            LayerKind::Sigmoid => None,
        };
        out.push(qp);
    }
    Ok(out)
}

/// Quantizes all weights and fixes activation parameters from `stats`.
pub fn quantize_network(net: &NetworkGraph, stats: &CalibrationStats) -> Result<QuantizedNetwork> {
    let mut sites = BTreeMap::new();
    for node in net.nodes() {
        let names: Vec<String> = match &node.kind {
            LayerKind::Input => vec![INPUT_SITE.into()],
            LayerKind::Attention(_) => attention_sites(&node.name).to_vec(),
            LayerKind::Concat | LayerKind::Linear { .. } | LayerKind::Project { .. } => vec![out_site(&node.name)],
            _ => vec![],
        };
        for name in names {
            let &(lo, hi) = stats
                .sites
                .get(&name)
                .ok_or_else(|| Error::Config(format!("no calibration statistics for site {name}")))?;
            sites.insert(name, compute_qparams(lo, hi)?);
        }
    }
    let in_params = node_params(net.nodes(), &sites)?;
    let mut weights = BTreeMap::new();
    let mut biases = BTreeMap::new();
    for node in net.nodes() {
        for pname in node.kind.param_names() {
            let key = format!("{}.{pname}", node.name);
            if pname == "bias" {
                continue;
            }
            weights.insert(key.clone(), quantize_weight(&net.params[&key])?);
        }
        if matches!(node.kind, LayerKind::Linear { .. } | LayerKind::Project { .. }) {
            let s_in = in_params[node.inputs[0].0]
                .ok_or_else(|| Error::Config(format!("{} consumes an unquantized value", node.name)))?
                .scale;
            let s_w = weights[&format!("{}.weight", node.name)].qparams.scale;
            let scale = s_in * s_w;
            let b = &net.params[&format!("{}.bias", node.name)];
            let data = b.map(|v| ((v as f64) / scale).round_ties_even().clamp(i32::MIN as f64, i32::MAX as f64) as i32);
            biases.insert(format!("{}.bias", node.name), QuantizedBias { data, scale });
        }
    }
    let qnet = QuantizedNetwork {
        config: net.config.clone(),
        nodes: net.nodes().to_vec(),
        weights,
        biases,
        sites,
    };
    qnet.validate()?;
    Ok(qnet)
}

/// Embedding table re-expressed in integer units of the key scale.
fn key_domain_embedding(spec: &AttentionSpec, e_row: &QuantizedTensor, e_col: &QuantizedTensor, key: QuantParams) -> Vec<i32> {
    let w = AttentionWeights {
        w_q: Tensor::<f64>::zeros(&[spec.c_out, spec.c_in]),
        w_k: Tensor::zeros(&[spec.c_out, spec.c_in]),
        w_v: Tensor::zeros(&[spec.c_out, spec.c_in]),
        e_row: e_row.data.map(|q| e_row.qparams.dequantize(q)),
        e_col: e_col.data.map(|q| e_col.qparams.dequantize(q)),
    };
    w.embedding_table(spec)
        .into_iter()
        .map(|e| (e / key.scale).round_ties_even() as i32)
        .collect()
}

fn pixels_i8(x: &Tensor<i8>) -> Result<(Shape4, Vec<i8>)> {
    let s = Shape4::of(x)?;
    let plane = s.h * s.w;
    let mut out = vec![0i8; s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for hw in 0..plane {
                out[(n * plane + hw) * s.c + c] = x.data()[(n * s.c + c) * plane + hw];
            }
        }
    }
    Ok((s, out))
}

fn unpixels_i8(p: &[i8], s: Shape4) -> Tensor<i8> {
    let plane = s.h * s.w;
    Tensor::from_fn(&s.dims(), |i| {
        let (nc, hw) = (i / plane, i % plane);
        let (n, c) = (nc / s.c, nc % s.c);
        p[(n * plane + hw) * s.c + c]
    })
}

impl QuantizedNetwork {
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    /// Checks every weight, bias and site against the graph.
    pub fn validate(&self) -> Result<()> {
        node_params(&self.nodes, &self.sites)?;
        for qp in self.sites.values() {
            qp.validate()?;
        }
        let mut expected = 0;
        for node in &self.nodes {
            for pname in node.kind.param_names() {
                let key = format!("{}.{pname}", node.name);
                let present = if pname == "bias" {
                    self.biases.contains_key(&key)
                } else {
                    self.weights.get(&key).map(|w| w.qparams.validate()).transpose()?.is_some()
                };
                if !present {
                    return Err(Error::Config(format!("quantized network lacks {key}")));
                }
                expected += 1;
            }
        }
        if expected != self.weights.len() + self.biases.len() {
            return Err(Error::Config("quantized network carries unknown tensors".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> u64 {
        self.weights.values().map(|w| w.data.len() as u64).sum::<u64>() + self.biases.values().map(|b| b.data.len() as u64).sum::<u64>()
    }

    fn weight(&self, node: &str, name: &str) -> &QuantizedTensor {
        &self.weights[&format!("{node}.{name}")]
    }

    fn attention(&self, node: &GraphNode, spec: &AttentionSpec, x: &QuantizedTensor) -> Result<QuantizedTensor> {
        let [sq, sk, sv, sl, so] = attention_sites(&node.name).map(|s| self.sites[&s]);
        let (s, xp) = pixels_i8(&x.data)?;
        if s.c != spec.c_in {
            return Err(Error::shape("attention", format!("input has {} channels, layer expects {}", s.c, spec.c_in)));
        }
        let pixels = s.n * s.h * s.w;
        let (c, area) = (spec.c_out, spec.window_area());
        let zx = x.qparams.zero_point;
        let proj = |name: &str, out: QuantParams| {
            let w = self.weight(&node.name, name);
            let m = x.qparams.scale * w.qparams.scale / out.scale;
            qgemm(&xp, zx, w.data.data(), 0, (pixels, spec.c_in, c), true, None, m, out.zero_point)
        };
        let q = proj("w_q", sq)?;
        let k = proj("w_k", sk)?;
        let v = proj("w_v", sv)?;
        let ek = key_domain_embedding(spec, self.weight(&node.name, "e_row"), self.weight(&node.name, "e_col"), sk);
        let m_logit = sq.scale * sk.scale / sl.scale;
        let m_out = PROB_PARAMS.scale * sv.scale / so.scale;
        let (zq, zk, zv, zp) = (sq.zero_point as i64, sk.zero_point as i64, sv.zero_point as i64, PROB_PARAMS.zero_point as i64);

        let mut y = vec![0i8; pixels * c];
        par::for_each_chunk_mut(&mut y, c, |p, yp| {
            let (n, i, j) = (p / (s.h * s.w), (p / s.w) % s.h, p % s.w);
            let qp = &q[p * c..(p + 1) * c];
            let mut probs = vec![0f32; area];
            let mut src = vec![None; area];
            for a in 0..spec.window_h {
                for b in 0..spec.window_w {
                    let o = a * spec.window_w + b;
                    let nb = neighbour(spec, s.h, s.w, i, j, a, b).map(|(u, vv)| (n * s.h + u) * s.w + vv);
                    src[o] = nb;
                    let e = &ek[o * c..(o + 1) * c];
                    let mut acc: i64 = 0;
                    for ch in 0..c {
                        let kk = nb.map_or(0, |u| k[u * c + ch] as i64 - zk) + e[ch] as i64;
                        acc += (qp[ch] as i64 - zq) * kk;
                    }
                    probs[o] = sl.dequantize(requantize(acc, m_logit, sl.zero_point)) as f32;
                }
            }
            softmax_in_place(&mut probs);
            let pq: Vec<i64> = probs.iter().map(|&r| PROB_PARAMS.quantize(r as f64) as i64 - zp).collect();
            for (ch, out) in yp.iter_mut().enumerate() {
                let mut acc: i64 = 0;
                for o in 0..area {
                    if let Some(u) = src[o] {
                        acc += pq[o] * (v[u * c + ch] as i64 - zv);
                    }
                }
                *out = requantize(acc, m_out, so.zero_point);
            }
        });
        Ok(QuantizedTensor {
            data: unpixels_i8(&y, Shape4 { c, ..s }),
            qparams: so,
        })
    }

    fn dense(&self, node: &GraphNode, x_rows: &[i8], x_qp: QuantParams, rows: usize) -> Result<Vec<i8>> {
        let w = self.weight(&node.name, "weight");
        let b = &self.biases[&format!("{}.bias", node.name)];
        let out = self.sites[&out_site(&node.name)];
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        if x_rows.len() != rows * d_in {
            return Err(Error::shape(node.kind.tag(), format!("input width {} vs {d_in}", x_rows.len() / rows.max(1))));
        }
        let m = x_qp.scale * w.qparams.scale / out.scale;
        qgemm(x_rows, x_qp.zero_point, w.data.data(), 0, (rows, d_in, d_out), true, Some(b.data.data()), m, out.zero_point)
    }

    /// Integer forward pass of an already quantized input. Returns the
    /// dequantized output of the final node.
    pub fn forward_quantized(&self, x: &QuantizedTensor) -> Result<Tensor<f32>> {
        let mut vals: Vec<Option<QuantizedTensor>> = Vec::with_capacity(self.nodes.len());
        let mut pools: BTreeMap<usize, PoolIndices> = BTreeMap::new();
        let mut result = None;
        for (id, node) in self.nodes.iter().enumerate() {
            let inp = |k: usize| -> Result<&QuantizedTensor> {
                vals[node.inputs[k].0]
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("{} consumes a float value", node.name)))
            };
            let at = |e: Error| match e {
                Error::Shape { op, detail } => Error::Shape {
                    op: format!("node {} ({op})", node.name),
                    detail,
                },
                other => other,
            };
            let v = match &node.kind {
                LayerKind::Input => {
                    if x.qparams != self.sites[INPUT_SITE] {
                        return Err(Error::contract("quantized_forward", "input is not quantized with the input site parameters"));
                    }
                    Some(x.clone())
                }
                LayerKind::Attention(spec) => Some(self.attention(node, spec, inp(0)?).map_err(at)?),
                LayerKind::Relu => {
                    let x = inp(0)?;
                    let z = x.qparams.zero_point as i8;
                    Some(QuantizedTensor {
                        data: x.data.map(|q| q.max(z)),
                        qparams: x.qparams,
                    })
                }
                LayerKind::MaxPool { kernel, stride } => {
                    let x = inp(0)?;
                    let z = x.qparams.zero_point;
                    let (y, idx) = maxpool2d(&x.data.map(|q| (q as i32 - z) as f32), *kernel, *stride).map_err(at)?;
                    pools.insert(id, idx);
                    Some(QuantizedTensor {
                        data: y.map(|r| (r as i32 + z) as i8),
                        qparams: x.qparams,
                    })
                }
                LayerKind::MaxUnpool { pool } => {
                    let x = inp(0)?;
                    let z = x.qparams.zero_point;
                    let idx = &pools[&pool.0];
                    let y = maxunpool2d(&x.data.map(|q| (q as i32 - z) as f32), idx, idx.input).map_err(at)?;
                    Some(QuantizedTensor {
                        data: y.map(|r| (r as i32 + z) as i8),
                        qparams: x.qparams,
                    })
                }
                LayerKind::Concat => {
                    let to = self.sites[&out_site(&node.name)];
                    let parts: Vec<Tensor<i8>> = node
                        .inputs
                        .iter()
                        .enumerate()
                        .map(|(k, _)| inp(k).map(|t| requantize_tensor(t, to).data))
                        .collect::<Result<_>>()?;
                    let refs: Vec<&Tensor<i8>> = parts.iter().collect();
                    Some(QuantizedTensor {
                        data: concat(&refs, 1).map_err(at)?,
                        qparams: to,
                    })
                }
                LayerKind::Flatten => {
                    let x = inp(0)?;
                    let n = x.data.dim(0);
                    Some(QuantizedTensor {
                        data: x.data.reshape(&[n, x.data.len() / n])?,
                        qparams: x.qparams,
                    })
                }
                LayerKind::Linear { d_out, .. } => {
                    let x = inp(0)?;
                    let rows = x.data.dim(0);
                    let y = self.dense(node, x.data.data(), x.qparams, rows).map_err(at)?;
                    Some(QuantizedTensor {
                        data: Tensor::new(&[rows, *d_out], y)?,
                        qparams: self.sites[&out_site(&node.name)],
                    })
                }
                LayerKind::Project { c_out, .. } => {
                    let x = inp(0)?;
                    let (s, xp) = pixels_i8(&x.data).map_err(at)?;
                    let y = self.dense(node, &xp, x.qparams, s.n * s.h * s.w).map_err(at)?;
                    Some(QuantizedTensor {
                        data: unpixels_i8(&y, Shape4 { c: *c_out, ..s }),
                        qparams: self.sites[&out_site(&node.name)],
                    })
                }
                LayerKind::Sigmoid => {
                    result = Some(dequantize(inp(0)?).map(sigmoid));
                    None
                }
            };
            vals.push(v);
        }
        match (result, vals.pop().flatten()) {
            (Some(r), None) => Ok(r),
            (_, Some(last)) => Ok(dequantize(&last)),
            (None, None) => Err(Error::Config("graph produced no output".into())),
        }
    }

    pub fn input_params(&self) -> QuantParams {
        self.sites[INPUT_SITE]
    }

    /// Shifts `x` as the float model does, quantizes it with the input site
    /// parameters and runs the network.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let shift = self.config.input_shift;
        self.forward_quantized(&quantize_tensor(&x.map(|v| v - shift), self.input_params()))
    }

    /// Probabilities, as [`NetworkGraph::predict`].
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let out = self.forward(x)?;
        Ok(match self.config.task {
            crate::models::Task::Cls => out.map(sigmoid),
            crate::models::Task::Seg => out,
        })
    }

    /// Output parameters of the final quantized node.
    pub fn output_params(&self) -> Option<QuantParams> {
        let params = node_params(&self.nodes, &self.sites).ok()?;
        params.iter().rev().flatten().next().copied()
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        weights: BTreeMap<String, QuantizedTensor>,
        biases: BTreeMap<String, QuantizedBias>,
        sites: BTreeMap<String, QuantParams>,
    ) -> Result<Self> {
        let nodes = NetworkGraph::build(&config)?.nodes().to_vec();
        let q = Self {
            config,
            nodes,
            weights,
            biases,
            sites,
        };
        q.validate()?;
        for node in &q.nodes {
            for pname in node.kind.param_names().into_iter().filter(|&n| n != "bias") {
                let key = format!("{}.{pname}", node.name);
                let mut template = vec![];
                match &node.kind {
                    LayerKind::Attention(spec) => {
                        let w = AttentionWeights::<f32>::zeros(spec);
                        let i = WEIGHT_NAMES.iter().position(|&n| n == pname).expect("attention weight");
                        template.extend_from_slice(w.buffers()[i].shape());
                    }
                    LayerKind::Linear { d_in, d_out } => template.extend([*d_out, *d_in]),
                    LayerKind::Project { c_in, c_out } => template.extend([*c_out, *c_in]),
                    _ => {}
                }
                if q.weights[&key].shape() != template.as_slice() {
                    return Err(Error::shape("quantized checkpoint", format!("{key}: {:?} vs {template:?}", q.weights[&key].shape())));
                }
            }
        }
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_scale_range() {
        let qp = compute_qparams(0.0, 255.0).unwrap();
        assert_eq!(qp, QuantParams { scale: 1.0, zero_point: -128 });
    }

    #[test]
    fn symmetric_range_rounds_half_even() {
        // -(-1) / (2/255) = 127.5 -> 128 (even) -> Z = 0
        let qp = compute_qparams(-1.0, 1.0).unwrap();
        assert_eq!(qp.scale, 2.0 / 255.0);
        assert_eq!(qp.zero_point, 0);
    }

    #[test]
    fn degenerate_and_invalid_ranges() {
        assert_eq!(compute_qparams(0.0, 0.0).unwrap(), QuantParams { scale: 1.0, zero_point: 0 });
        assert!(compute_qparams(f64::NAN, 1.0).is_err());
        assert!(compute_qparams(1.0, 0.0).is_err());
        let widened = compute_qparams(2.0, 4.0).unwrap();
        assert_eq!(widened.zero_point, -128);
        assert_eq!(widened.scale, 4.0 / 255.0);
    }

    #[test]
    fn quantize_examples() {
        let qp = QuantParams { scale: 0.1, zero_point: 3 };
        assert_eq!(qp.quantize(1.0), 13);
        assert_eq!(qp.quantize(0.0), 3);
        assert_eq!(qp.dequantize(3), 0.0);
        assert_eq!(qp.dequantize(4), 0.1);
        assert_eq!(qp.quantize(1e9), 127);
        assert_eq!(qp.quantize(-1e9), -128);
    }

    #[test]
    fn matmul_hand_case() {
        let one = QuantParams { scale: 1.0, zero_point: 0 };
        let a = QuantizedTensor {
            data: Tensor::new(&[1, 1], vec![3]).unwrap(),
            qparams: one,
        };
        let b = QuantizedTensor {
            data: Tensor::new(&[1, 1], vec![4]).unwrap(),
            qparams: one,
        };
        let out = quantized_matmul(&a, &b, None, QuantParams { scale: 2.0, zero_point: 0 }).unwrap();
        assert_eq!(out.data.data(), &[6]);
    }

    #[test]
    fn matmul_at_zero_points_gives_output_zero_point() {
        let qa = QuantParams { scale: 0.3, zero_point: -7 };
        let qb = QuantParams { scale: 0.2, zero_point: 5 };
        let out_qp = QuantParams { scale: 0.05, zero_point: 11 };
        let a = QuantizedTensor {
            data: Tensor::full(&[3, 4], -7),
            qparams: qa,
        };
        let b = QuantizedTensor {
            data: Tensor::full(&[4, 2], 5),
            qparams: qb,
        };
        let out = quantized_matmul(&a, &b, None, out_qp).unwrap();
        assert!(out.data.data().iter().all(|&q| q == 11));
    }

    #[test]
    fn matmul_detects_overflow() {
        let qp = QuantParams { scale: 1.0, zero_point: 0 };
        let a = QuantizedTensor {
            data: Tensor::full(&[1, 200_000], -128),
            qparams: qp,
        };
        let b = QuantizedTensor {
            data: Tensor::full(&[200_000, 1], -128),
            qparams: qp,
        };
        assert!(matches!(quantized_matmul(&a, &b, None, qp), Err(Error::Numeric { .. })));
    }

    #[test]
    fn calibration_monoid() {
        let mut a = CalibrationStats::default();
        a.observe("s", &[1.0, 2.0]).unwrap();
        let mut b = CalibrationStats::default();
        b.observe("s", &[-1.0, 0.5]).unwrap();
        b.observe("t", &[3.0]).unwrap();
        let mut both = CalibrationStats::default();
        both.observe("s", &[1.0, 2.0]).unwrap();
        both.observe("s", &[-1.0, 0.5]).unwrap();
        both.observe("t", &[3.0]).unwrap();
        a.merge(&b);
        assert_eq!(a, both);
        assert!(a.observe("s", &[f32::NAN]).is_err());
    }
}
