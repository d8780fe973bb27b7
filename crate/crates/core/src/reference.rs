//! Slow literal implementations with scalar operation counters.
//!
//! Everything here materialises the textbook form of each layer one scalar
//! at a time and counts every multiply and add it performs. They serve as
//! oracles for the fast kernels and for the static cost model.

use rand::Rng;

use crate::attention::AttentionWeights;
use crate::cost::OpTally;
use crate::error::{Error, Result};
use crate::layers::{maxpool2d, maxunpool2d, PoolIndices};
use crate::models::{LayerKind, NetworkGraph};
use crate::tensor::{concat, sigmoid, Shape4, Tensor};

/// Scalar operation counters, split by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Query-key inner products.
    pub qk: OpTally,
    /// Softmax-weighted value sums.
    pub av: OpTally,
    /// Positional-embedding additions onto keys.
    pub embed_add: u64,
    /// Q/K/V projections of attention.
    pub projection: OpTally,
    /// Convolution and linear layers.
    pub dense: OpTally,
}

impl Counters {
    /// Stages covered by the cost model: attention products plus dense layers.
    pub fn counted(&self) -> OpTally {
        self.qk + self.av + self.dense
    }

    pub fn attention(&self) -> OpTally {
        self.qk + self.av
    }
}

/// Attention parameters as plain row-major arrays. Unlike the layer itself,
/// odd `c_out` is allowed; the embedding is then skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct RefAttention {
    pub c_in: usize,
    pub c_out: usize,
    pub window_h: usize,
    pub window_w: usize,
    /// `c_out × c_in` each.
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    /// `(c_out/2) × window_h`.
    pub e_row: Vec<f64>,
    /// `(c_out/2) × window_w`.
    pub e_col: Vec<f64>,
}

impl RefAttention {
    pub fn from_weights(spec: &crate::attention::AttentionSpec, w: &AttentionWeights<f64>) -> Self {
        Self {
            c_in: spec.c_in,
            c_out: spec.c_out,
            window_h: spec.window_h,
            window_w: spec.window_w,
            w_q: w.w_q.data().to_vec(),
            w_k: w.w_k.data().to_vec(),
            w_v: w.w_v.data().to_vec(),
            e_row: w.e_row.data().to_vec(),
            e_col: w.e_col.data().to_vec(),
        }
    }

    pub fn random(c_in: usize, c_out: usize, window: usize, rng: &mut impl Rng) -> Self {
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let half = c_out / 2;
        Self {
            c_in,
            c_out,
            window_h: window,
            window_w: window,
            w_q: v(c_out * c_in),
            w_k: v(c_out * c_in),
            w_v: v(c_out * c_in),
            e_row: v(half * window),
            e_col: v(half * window),
        }
    }

    fn embedded(&self) -> bool {
        self.c_out.is_multiple_of(2)
    }
}

fn matvec(w: &[f64], x: &[f64], rows: usize, counter: &mut OpTally) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += w[r * cols + c] * x[c];
                counter.mul += 1;
                counter.add += 1;
            }
            acc
        })
        .collect()
}

fn pixel(x: &Tensor<f64>, s: Shape4, n: usize, u: isize, v: isize) -> Vec<f64> {
    if u < 0 || v < 0 || u >= s.h as isize || v >= s.w as isize {
        return vec![0.0; s.c];
    }
    (0..s.c)
        .map(|c| x.data()[((n * s.c + c) * s.h + u as usize) * s.w + v as usize])
        .collect()
}

/// Per-pixel local attention written out literally: query from the centre
/// pixel, keys and values from every window position (zero pixels outside
/// the image), embedding added to keys, softmax over the window, weighted
/// value sum. Counters tally every scalar operation.
pub fn reference_attention(x: &Tensor<f64>, att: &RefAttention, counters: &mut Counters) -> Result<Tensor<f64>> {
    let s = Shape4::of(x)?;
    if s.c != att.c_in {
        return Err(Error::shape("reference attention", format!("{} channels, expected {}", s.c, att.c_in)));
    }
    let c = att.c_out;
    let half = c / 2;
    let (wh, ww) = (att.window_h, att.window_w);
    let mut y = Tensor::zeros(&[s.n, c, s.h, s.w]);
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                let q = matvec(&att.w_q, &pixel(x, s, n, i as isize, j as isize), c, &mut counters.projection);
                let mut logits = Vec::with_capacity(wh * ww);
                let mut values = Vec::with_capacity(wh * ww);
                for a in 0..wh {
                    for b in 0..ww {
                        let u = i as isize + a as isize - (wh / 2) as isize;
                        let v = j as isize + b as isize - (ww / 2) as isize;
                        let xr = pixel(x, s, n, u, v);
                        let mut k = matvec(&att.w_k, &xr, c, &mut counters.projection);
                        if att.embedded() {
                            for ch in 0..half {
                                k[ch] += att.e_col[ch * ww + b];
                                k[half + ch] += att.e_row[ch * wh + a];
                                counters.embed_add += 2;
                            }
                        }
                        values.push(matvec(&att.w_v, &xr, c, &mut counters.projection));
                        let mut l = 0.0;
                        for ch in 0..c {
                            l += q[ch] * k[ch];
                            counters.qk.mul += 1;
                            counters.qk.add += 1;
                        }
                        logits.push(l);
                    }
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (p, v) in values.iter().enumerate() {
                        acc += e[p] / z * v[ch];
                        counters.av.mul += 1;
                        counters.av.add += 1;
                    }
                    y.data_mut()[((n * c + ch) * s.h + i) * s.w + j] = acc;
                }
            }
        }
    }
    Ok(y)
}

/// `y = W x (+ b)` per row of an `N × d_in` batch; `w` is `d_out × d_in`.
/// Each output starts from its first product, so a bias-free output of
/// fan-in `k` costs `k` multiplies and `k − 1` adds.
pub fn reference_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, counter: &mut OpTally) -> Result<Tensor<f64>> {
    if x.rank() != 2 || w.rank() != 2 || w.dim(1) != x.dim(1) {
        return Err(Error::shape("reference linear", format!("x {:?}, w {:?}", x.shape(), w.shape())));
    }
    let (n, d_in, d_out) = (x.dim(0), x.dim(1), w.dim(0));
    let mut y = Tensor::zeros(&[n, d_out]);
    for r in 0..n {
        for o in 0..d_out {
            let mut acc = w.data()[o * d_in] * x.data()[r * d_in];
            counter.mul += 1;
            for i in 1..d_in {
                acc += w.data()[o * d_in + i] * x.data()[r * d_in + i];
                counter.mul += 1;
                counter.add += 1;
            }
            if let Some(b) = b {
                acc += b.data()[o];
                counter.add += 1;
            }
            y.data_mut()[r * d_out + o] = acc;
        }
    }
    Ok(y)
}

/// Direct 2-D convolution, `w` of shape `c_out × c_in × k_h × k_w`, with
/// zero padding; padded taps are multiplied like any other.
pub fn reference_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    padding: usize,
    counter: &mut OpTally,
) -> Result<Tensor<f64>> {
    let s = Shape4::of(x)?;
    if w.rank() != 4 || w.dim(1) != s.c || stride == 0 {
        return Err(Error::shape("reference conv2d", format!("x {:?}, w {:?}", x.shape(), w.shape())));
    }
    let (co, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    if s.h + 2 * padding < kh || s.w + 2 * padding < kw {
        return Err(Error::shape("reference conv2d", "kernel larger than padded input".to_string()));
    }
    let oh = (s.h + 2 * padding - kh) / stride + 1;
    let ow = (s.w + 2 * padding - kw) / stride + 1;
    let mut y = Tensor::zeros(&[s.n, co, oh, ow]);
    for n in 0..s.n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    let mut first = true;
                    for c in 0..s.c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let u = (i * stride + a) as isize - padding as isize;
                                let v = (j * stride + bb) as isize - padding as isize;
                                let xv = pixel(x, s, n, u, v)[c];
                                let prod = w.data()[((o * s.c + c) * kh + a) * kw + bb] * xv;
                                counter.mul += 1;
                                if first {
                                    acc = prod;
                                    first = false;
                                } else {
                                    acc += prod;
                                    counter.add += 1;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[o];
                        counter.add += 1;
                    }
                    y.data_mut()[((n * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Ok(y)
}

/// Output of an instrumented run: the network output, total counters and
/// the per-layer operation counts in graph order.
#[derive(Clone, Debug)]
pub struct InstrumentedRun {
    pub output: Tensor<f64>,
    pub counters: Counters,
    pub layers: Vec<(String, Counters)>,
}

/// Runs a model graph through the literal layer implementations, counting
/// every scalar operation.
pub fn instrumented_forward(net: &NetworkGraph, x: &Tensor<f64>) -> Result<InstrumentedRun> {
    let mut values: Vec<Tensor<f64>> = Vec::with_capacity(net.nodes().len());
    let mut pools: Vec<Option<PoolIndices>> = Vec::with_capacity(net.nodes().len());
    let mut total = Counters::default();
    let mut layers = Vec::new();
    let param = |name: &str, p: &str| -> Tensor<f64> { net.params[&format!("{name}.{p}")].cast() };
    for node in net.nodes() {
        let mut ctr = Counters::default();
        let inp = |k: usize| &values[node.inputs[k].0];
        let mut pool = None;
        let v = match &node.kind {
            LayerKind::Input => {
                let shift = net.config.input_shift as f64;
                x.map(|v| v - shift)
            }
            LayerKind::Attention(spec) => {
                let w = AttentionWeights {
                    w_q: param(&node.name, "w_q"),
                    w_k: param(&node.name, "w_k"),
                    w_v: param(&node.name, "w_v"),
                    e_row: param(&node.name, "e_row"),
                    e_col: param(&node.name, "e_col"),
                };
                reference_attention(inp(0), &RefAttention::from_weights(spec, &w), &mut ctr)?
            }
            LayerKind::Relu => inp(0).map(|v| v.max(0.0)),
            LayerKind::Sigmoid => inp(0).map(sigmoid),
            LayerKind::MaxPool { kernel, stride } => {
                let (y, idx) = maxpool2d(inp(0), *kernel, *stride)?;
                pool = Some(idx);
                y
            }
            LayerKind::MaxUnpool { pool: p } => {
                let idx = pools[p.0].as_ref().expect("unpool follows its pool");
                maxunpool2d(inp(0), idx, idx.input)?
            }
            LayerKind::Concat => {
                let parts: Vec<&Tensor<f64>> = node.inputs.iter().map(|i| &values[i.0]).collect();
                concat(&parts, 1)?
            }
            LayerKind::Flatten => {
                let t = inp(0);
                let n = t.dim(0);
                t.reshape(&[n, t.len() / n.max(1)])?
            }
            LayerKind::Linear { .. } => {
                reference_linear(inp(0), &param(&node.name, "weight"), Some(&param(&node.name, "bias")), &mut ctr.dense)?
            }
            LayerKind::Project { c_in, c_out } => {
                let w = param(&node.name, "weight").reshape(&[*c_out, *c_in, 1, 1])?;
                reference_conv2d(inp(0), &w, Some(&param(&node.name, "bias")), 1, 0, &mut ctr.dense)?
            }
        };
        total.qk += ctr.qk;
        total.av += ctr.av;
        total.embed_add += ctr.embed_add;
        total.projection += ctr.projection;
        total.dense += ctr.dense;
        layers.push((node.name.clone(), ctr));
        values.push(v);
        pools.push(pool);
    }
    Ok(InstrumentedRun {
        output: values.pop().expect("non-empty graph"),
        counters: total,
        layers,
    })
}
