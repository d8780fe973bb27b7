//! Stand-alone local self-attention.
//!
//! Every output pixel attends over the `window_h × window_w` neighbourhood
//! centred on it. The query comes from the centre pixel, keys and values from
//! the neighbourhood, and a learned relative positional embedding is added to
//! the keys: the first half of the key channels receives the column-offset
//! table, the second half the row-offset table.
//!
//! Single head, no biases, zero padding at the borders with a same-sized
//! output grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::OpTally;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm, softmax_in_place, Float, Shape4, Tensor};

/// How neighbourhood positions outside the image are filled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Out-of-bounds positions read as zero pixels.
    #[default]
    Zero,
    /// Positions wrap around the image (circular). Used to test translation
    /// equivariance; models never use it.
    Wrap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub window_h: usize,
    pub window_w: usize,
    #[serde(default)]
    pub padding: Padding,
}

impl AttentionSpec {
    pub fn new(c_in: usize, c_out: usize, window_h: usize, window_w: usize) -> Result<Self> {
        let spec = Self {
            c_in,
            c_out,
            window_h,
            window_w,
            padding: Padding::Zero,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn square(c_in: usize, c_out: usize, window: usize) -> Result<Self> {
        Self::new(c_in, c_out, window, window)
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Config(format!(
                "attention channels must be positive, got {} -> {}",
                self.c_in, self.c_out
            )));
        }
        if !self.c_out.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attention c_out must be even to split keys, got {}",
                self.c_out
            )));
        }
        if self.window_h.is_multiple_of(2) || self.window_w.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attention window must have odd extents, got {}x{}",
                self.window_h, self.window_w
            )));
        }
        Ok(())
    }

    pub fn window_area(&self) -> usize {
        self.window_h * self.window_w
    }

    pub fn half(&self) -> usize {
        self.c_out / 2
    }
}

/// Learnable tensors of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    /// `c_out × c_in`
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// `(c_out/2) × window_h`
    pub e_row: Tensor<T>,
    /// `(c_out/2) × window_w`
    pub e_col: Tensor<T>,
}

/// Names of the weight buffers, in storage order.
pub const WEIGHT_NAMES: [&str; 5] = ["w_q", "w_k", "w_v", "e_row", "e_col"];

impl<T: Float> AttentionWeights<T> {
    pub fn zeros(spec: &AttentionSpec) -> Self {
        let proj = [spec.c_out, spec.c_in];
        Self {
            w_q: Tensor::zeros(&proj),
            w_k: Tensor::zeros(&proj),
            w_v: Tensor::zeros(&proj),
            e_row: Tensor::zeros(&[spec.half(), spec.window_h]),
            e_col: Tensor::zeros(&[spec.half(), spec.window_w]),
        }
    }

    /// Projections uniform in ±1/√c_in, embeddings uniform in ±1/√(c_out/2).
    pub fn init(spec: &AttentionSpec, rng: &mut impl Rng) -> Self {
        let wb = 1.0 / (spec.c_in as f64).sqrt();
        let eb = 1.0 / (spec.half() as f64).sqrt();
        let mut uniform = |shape: &[usize], bound: f64| {
            Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
        };
        let proj = [spec.c_out, spec.c_in];
        Self {
            w_q: uniform(&proj, wb),
            w_k: uniform(&proj, wb),
            w_v: uniform(&proj, wb),
            e_row: uniform(&[spec.half(), spec.window_h], eb),
            e_col: uniform(&[spec.half(), spec.window_w], eb),
        }
    }

    pub fn validate(&self, spec: &AttentionSpec) -> Result<()> {
        let proj = [spec.c_out, spec.c_in];
        let expected: [(&str, &Tensor<T>, [usize; 2]); 5] = [
            ("w_q", &self.w_q, proj),
            ("w_k", &self.w_k, proj),
            ("w_v", &self.w_v, proj),
            ("e_row", &self.e_row, [spec.half(), spec.window_h]),
            ("e_col", &self.e_col, [spec.half(), spec.window_w]),
        ];
        for (name, t, shape) in expected {
            if t.shape() != shape {
                return Err(Error::shape(
                    "attention weights",
                    format!("{name} is {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn buffers(&self) -> [&Tensor<T>; 5] {
        [&self.w_q, &self.w_k, &self.w_v, &self.e_row, &self.e_col]
    }

    pub fn cast<U: Float>(&self) -> AttentionWeights<U> {
        AttentionWeights {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            e_row: self.e_row.cast(),
            e_col: self.e_col.cast(),
        }
    }

    /// Embedding vector added to the key at window offset `(a, b)`.
    fn embedding_for(&self, spec: &AttentionSpec, a: usize, b: usize, out: &mut [T]) {
        let half = spec.half();
        for c in 0..half {
            out[c] = self.e_col.data()[c * spec.window_w + b];
            out[half + c] = self.e_row.data()[c * spec.window_h + a];
        }
    }

    /// `window_area × c_out` table of per-offset embeddings, offset-major.
    pub(crate) fn embedding_table(&self, spec: &AttentionSpec) -> Vec<T> {
        let mut table = vec![T::zero(); spec.window_area() * spec.c_out];
        for a in 0..spec.window_h {
            for b in 0..spec.window_w {
                let o = a * spec.window_w + b;
                self.embedding_for(spec, a, b, &mut table[o * spec.c_out..(o + 1) * spec.c_out]);
            }
        }
        table
    }
}

/// Parameter count: three bias-free projections plus the two embedding tables.
pub fn attention_param_count(spec: &AttentionSpec) -> u64 {
    (3 * spec.c_out * spec.c_in + spec.half() * (spec.window_h + spec.window_w)) as u64
}

/// Multiply and add counts of the attention stages (query-key products and
/// value aggregation) as `2·b²·c` each per output pixel, with `c = c_out` and
/// `b² = window_h·window_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionOps {
    pub per_pixel: OpTally,
    pub total: OpTally,
}

pub fn attention_op_count(spec: &AttentionSpec, out_h: usize, out_w: usize) -> AttentionOps {
    let per = 2 * (spec.window_area() * spec.c_out) as u64;
    let pixels = (out_h * out_w) as u64;
    AttentionOps {
        per_pixel: OpTally { mul: per, add: per },
        total: OpTally {
            mul: per * pixels,
            add: per * pixels,
        },
    }
}

/// Source pixel for window offset `(a, b)` around `(i, j)`, or `None` when
/// it falls into the zero padding.
#[inline]
pub(crate) fn neighbour(spec: &AttentionSpec, h: usize, w: usize, i: usize, j: usize, a: usize, b: usize) -> Option<(usize, usize)> {
    let di = a as isize - (spec.window_h / 2) as isize;
    let dj = b as isize - (spec.window_w / 2) as isize;
    let (u, v) = (i as isize + di, j as isize + dj);
    match spec.padding {
        Padding::Zero => {
            if u < 0 || v < 0 || u >= h as isize || v >= w as isize {
                None
            } else {
                Some((u as usize, v as usize))
            }
        }
        Padding::Wrap => Some((
            u.rem_euclid(h as isize) as usize,
            v.rem_euclid(w as isize) as usize,
        )),
    }
}

fn check_input<T>(x: &Tensor<T>, spec: &AttentionSpec) -> Result<Shape4> {
    let s = Shape4::of(x)?;
    if s.c != spec.c_in {
        return Err(Error::shape(
            "attention",
            format!("input has {} channels, layer expects {}", s.c, spec.c_in),
        ));
    }
    Ok(s)
}

/// Gathers the neighbourhood of every pixel: `N×C×H×W → N×H×W×C×wh×ww`.
pub fn extract_local_regions<T: Float>(x: &Tensor<T>, spec: &AttentionSpec) -> Result<Tensor<T>> {
    let s = check_input(x, spec)?;
    let (wh, ww) = (spec.window_h, spec.window_w);
    let mut out = Tensor::zeros(&[s.n, s.h, s.w, s.c, wh, ww]);
    let region = s.c * wh * ww;
    let xd = x.data();
    par::for_each_chunk_mut(out.data_mut(), region, |p, dst| {
        let j = p % s.w;
        let i = (p / s.w) % s.h;
        let n = p / (s.w * s.h);
        for a in 0..wh {
            for b in 0..ww {
                if let Some((u, v)) = neighbour(spec, s.h, s.w, i, j, a, b) {
                    for c in 0..s.c {
                        dst[(c * wh + a) * ww + b] = xd[((n * s.c + c) * s.h + u) * s.w + v];
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Adds the relative positional embedding to keys laid out as
/// `[..., c_out, window_h, window_w]`.
///
/// Channel `c < c_out/2` at offset `(a, b)` receives `e_col[c, b]`; channel
/// `c_out/2 + c` receives `e_row[c, a]`.
pub fn add_relative_embedding<T: Float>(keys: &Tensor<T>, e_row: &Tensor<T>, e_col: &Tensor<T>) -> Result<Tensor<T>> {
    let r = keys.rank();
    if r < 3 {
        return Err(Error::shape(
            "add_relative_embedding",
            format!("keys need [.., c, h, w] layout, got {:?}", keys.shape()),
        ));
    }
    let (c, wh, ww) = (keys.dim(r - 3), keys.dim(r - 2), keys.dim(r - 1));
    if c % 2 != 0 {
        return Err(Error::shape(
            "add_relative_embedding",
            format!("key channel count {c} is odd"),
        ));
    }
    let half = c / 2;
    if e_row.shape() != [half, wh] || e_col.shape() != [half, ww] {
        return Err(Error::shape(
            "add_relative_embedding",
            format!(
                "tables {:?}/{:?} do not fit keys with {c} channels and a {wh}x{ww} window",
                e_row.shape(),
                e_col.shape()
            ),
        ));
    }
    let mut out = keys.clone();
    let block = c * wh * ww;
    for chunk in out.data_mut().chunks_mut(block) {
        for ch in 0..c {
            for a in 0..wh {
                for b in 0..ww {
                    let e = if ch < half {
                        e_col.data()[ch * ww + b]
                    } else {
                        e_row.data()[(ch - half) * wh + a]
                    };
                    chunk[(ch * wh + a) * ww + b] += e;
                }
            }
        }
    }
    Ok(out)
}

/// NCHW → pixel-major `(N·H·W) × C`.
pub(crate) fn to_pixels<T: Float>(x: &Tensor<T>) -> Vec<T> {
    let s = Shape4::of(x).expect("rank-4 activation");
    let mut out = vec![T::zero(); s.numel()];
    let plane = s.h * s.w;
    let xd = x.data();
    par::for_each_chunk_mut(&mut out, s.c, |p, dst| {
        let n = p / plane;
        let hw = p % plane;
        for (c, d) in dst.iter_mut().enumerate() {
            *d = xd[(n * s.c + c) * plane + hw];
        }
    });
    out
}

/// Pixel-major `(N·H·W) × C` → NCHW.
pub(crate) fn from_pixels<T: Float>(pixels: &[T], s: Shape4) -> Tensor<T> {
    let mut out = Tensor::zeros(&s.dims());
    let plane = s.h * s.w;
    par::for_each_chunk_mut(out.data_mut(), plane, |nc, dst| {
        let n = nc / s.c;
        let c = nc % s.c;
        for (hw, d) in dst.iter_mut().enumerate() {
            *d = pixels[(n * plane + hw) * s.c + c];
        }
    });
    out
}

/// Intermediates kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    shape: Shape4,
    x_pixels: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `P × window_area` attention weights.
    alpha: Vec<T>,
}

impl<T: Float> AttentionCache<T> {
    /// Softmax weights of pixel `p` (flat `n, i, j` index) over its window.
    pub fn weights_at(&self, p: usize, window_area: usize) -> &[T] {
        &self.alpha[p * window_area..(p + 1) * window_area]
    }

    pub fn pixel_count(&self) -> usize {
        self.shape.n * self.shape.h * self.shape.w
    }

    /// Pixel-major query, key and value matrices.
    pub(crate) fn projections(&self) -> [&[T]; 3] {
        [&self.q, &self.k, &self.v]
    }

    /// Pre-softmax logits, `P × window_area`.
    pub(crate) fn logits(&self, spec: &AttentionSpec, weights: &AttentionWeights<T>) -> Vec<T> {
        let s = self.shape;
        let (c, area) = (spec.c_out, spec.window_area());
        let table = weights.embedding_table(spec);
        let mut out = vec![T::zero(); self.pixel_count() * area];
        par::for_each_chunk_mut(&mut out, area, |p, row| {
            let (n, i, j) = (p / (s.h * s.w), (p / s.w) % s.h, p % s.w);
            let qp = &self.q[p * c..(p + 1) * c];
            for a in 0..spec.window_h {
                for b in 0..spec.window_w {
                    let o = a * spec.window_w + b;
                    let e = &table[o * c..(o + 1) * c];
                    let nb = neighbour(spec, s.h, s.w, i, j, a, b).map(|(u, v)| (n * s.h + u) * s.w + v);
                    let mut l = T::zero();
                    for ch in 0..c {
                        let k = nb.map_or(T::zero(), |src| self.k[src * c + ch]);
                        l += qp[ch] * (k + e[ch]);
                    }
                    row[o] = l;
                }
            }
        });
        out
    }
}

fn project<T: Float>(x_pixels: &[T], w: &Tensor<T>, pixels: usize, spec: &AttentionSpec) -> Vec<T> {
    let mut out = vec![T::zero(); pixels * spec.c_out];
    gemm(x_pixels, w.data(), &mut out, pixels, spec.c_in, spec.c_out, false, true);
    out
}

/// Output `N×c_out×H×W`.
pub fn attention_forward<T: Float>(x: &Tensor<T>, spec: &AttentionSpec, weights: &AttentionWeights<T>) -> Result<Tensor<T>> {
    attention_forward_cached(x, spec, weights).map(|(y, _)| y)
}

pub fn attention_forward_cached<T: Float>(
    x: &Tensor<T>,
    spec: &AttentionSpec,
    weights: &AttentionWeights<T>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    spec.validate()?;
    weights.validate(spec)?;
    let s = check_input(x, spec)?;
    let pixels = s.n * s.h * s.w;
    let c = spec.c_out;
    let area = spec.window_area();

    let x_pixels = to_pixels(x);
    let q = project(&x_pixels, &weights.w_q, pixels, spec);
    let k = project(&x_pixels, &weights.w_k, pixels, spec);
    let v = project(&x_pixels, &weights.w_v, pixels, spec);
    let table = weights.embedding_table(spec);

    // One chunk per image row: y row then alpha row.
    let row_y = s.w * c;
    let row_a = s.w * area;
    let rows = s.n * s.h;
    let results: Vec<(Vec<T>, Vec<T>)> = par::map_range(rows, |r| {
        let n = r / s.h;
        let i = r % s.h;
        let mut y = vec![T::zero(); row_y];
        let mut alpha = vec![T::zero(); row_a];
        for j in 0..s.w {
            let p = (n * s.h + i) * s.w + j;
            let qp = &q[p * c..(p + 1) * c];
            let logits = &mut alpha[j * area..(j + 1) * area];
            for a in 0..spec.window_h {
                for b in 0..spec.window_w {
                    let o = a * spec.window_w + b;
                    let e = &table[o * c..(o + 1) * c];
                    let mut l = T::zero();
                    match neighbour(spec, s.h, s.w, i, j, a, b) {
                        Some((u, vv)) => {
                            let src = (n * s.h + u) * s.w + vv;
                            let ku = &k[src * c..(src + 1) * c];
                            for ch in 0..c {
                                l += qp[ch] * (ku[ch] + e[ch]);
                            }
                        }
                        None => {
                            for ch in 0..c {
                                l += qp[ch] * e[ch];
                            }
                        }
                    }
                    logits[o] = l;
                }
            }
            softmax_in_place(logits);
            let yp = &mut y[j * c..(j + 1) * c];
            for a in 0..spec.window_h {
                for b in 0..spec.window_w {
                    if let Some((u, vv)) = neighbour(spec, s.h, s.w, i, j, a, b) {
                        let wgt = logits[a * spec.window_w + b];
                        let src = (n * s.h + u) * s.w + vv;
                        for (o, &val) in yp.iter_mut().zip(&v[src * c..(src + 1) * c]) {
                            *o += wgt * val;
                        }
                    }
                }
            }
        }
        (y, alpha)
    });

    let mut y_pixels = Vec::with_capacity(pixels * c);
    let mut alpha = Vec::with_capacity(pixels * area);
    for (y, a) in results {
        y_pixels.extend_from_slice(&y);
        alpha.extend_from_slice(&a);
    }
    let out_shape = Shape4 { c, ..s };
    let y = from_pixels(&y_pixels, out_shape);
    if !y.all_finite() {
        return Err(Error::numeric("attention", "non-finite attention output"));
    }
    Ok((
        y,
        AttentionCache {
            shape: s,
            x_pixels,
            q,
            k,
            v,
            alpha,
        },
    ))
}

/// Gradients of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionGrads<T> {
    pub dx: Tensor<T>,
    pub weights: AttentionWeights<T>,
}

pub fn attention_backward<T: Float>(
    spec: &AttentionSpec,
    weights: &AttentionWeights<T>,
    cache: &AttentionCache<T>,
    dy: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    let s = cache.shape;
    let c = spec.c_out;
    let area = spec.window_area();
    if dy.shape() != [s.n, c, s.h, s.w] {
        return Err(Error::shape(
            "attention backward",
            format!("upstream gradient {:?} does not match output", dy.shape()),
        ));
    }
    let pixels = s.n * s.h * s.w;
    let dy_pixels = to_pixels(dy);
    let table = weights.embedding_table(spec);
    let (q, k, v, alpha) = (&cache.q, &cache.k, &cache.v, &cache.alpha);

    // Pass 1, per query pixel: logit gradients, query gradient and the
    // row-partial embedding gradient.
    let rows = s.n * s.h;
    let pass1: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_range(rows, |r| {
        let n = r / s.h;
        let i = r % s.h;
        let mut dl_row = vec![T::zero(); s.w * area];
        let mut dq_row = vec![T::zero(); s.w * c];
        let mut de_row = vec![T::zero(); area * c];
        let mut dalpha = vec![T::zero(); area];
        for j in 0..s.w {
            let p = (n * s.h + i) * s.w + j;
            let al = &alpha[p * area..(p + 1) * area];
            let g = &dy_pixels[p * c..(p + 1) * c];
            let mut weighted = T::zero();
            for a in 0..spec.window_h {
                for b in 0..spec.window_w {
                    let o = a * spec.window_w + b;
                    let mut d = T::zero();
                    if let Some((u, vv)) = neighbour(spec, s.h, s.w, i, j, a, b) {
                        let src = (n * s.h + u) * s.w + vv;
                        for ch in 0..c {
                            d += g[ch] * v[src * c + ch];
                        }
                    }
                    dalpha[o] = d;
                    weighted += al[o] * d;
                }
            }
            let qp = &q[p * c..(p + 1) * c];
            let dq = &mut dq_row[j * c..(j + 1) * c];
            for a in 0..spec.window_h {
                for b in 0..spec.window_w {
                    let o = a * spec.window_w + b;
                    let dl = al[o] * (dalpha[o] - weighted);
                    dl_row[j * area + o] = dl;
                    let e = &table[o * c..(o + 1) * c];
                    let nb = neighbour(spec, s.h, s.w, i, j, a, b);
                    for ch in 0..c {
                        let key = match nb {
                            Some((u, vv)) => k[((n * s.h + u) * s.w + vv) * c + ch] + e[ch],
                            None => e[ch],
                        };
                        dq[ch] += dl * key;
                        de_row[o * c + ch] += dl * qp[ch];
                    }
                }
            }
        }
        (dl_row, dq_row, de_row)
    });

    let mut dl = Vec::with_capacity(pixels * area);
    let mut dq = Vec::with_capacity(pixels * c);
    let mut de = vec![T::zero(); area * c];
    for (l, qrow, erow) in pass1 {
        dl.extend_from_slice(&l);
        dq.extend_from_slice(&qrow);
        for (acc, e) in de.iter_mut().zip(erow) {
            *acc += e;
        }
    }

    // Pass 2, per key/value pixel: gather contributions from every query
    // whose window covers it.
    let mut dkv = vec![T::zero(); pixels * 2 * c];
    par::for_each_chunk_mut(&mut dkv, 2 * c, |src, out| {
        let (dk, dv) = out.split_at_mut(c);
        let n = src / (s.h * s.w);
        let u = (src / s.w) % s.h;
        let vv = src % s.w;
        for a in 0..spec.window_h {
            for b in 0..spec.window_w {
                let di = a as isize - (spec.window_h / 2) as isize;
                let dj = b as isize - (spec.window_w / 2) as isize;
                let (mut i, mut j) = (u as isize - di, vv as isize - dj);
                match spec.padding {
                    Padding::Zero => {
                        if i < 0 || j < 0 || i >= s.h as isize || j >= s.w as isize {
                            continue;
                        }
                    }
                    Padding::Wrap => {
                        i = i.rem_euclid(s.h as isize);
                        j = j.rem_euclid(s.w as isize);
                    }
                }
                let p = (n * s.h + i as usize) * s.w + j as usize;
                let o = a * spec.window_w + b;
                let g = dl[p * area + o];
                let wgt = alpha[p * area + o];
                for ch in 0..c {
                    dk[ch] += g * q[p * c + ch];
                    dv[ch] += wgt * dy_pixels[p * c + ch];
                }
            }
        }
    });
    let mut dk = vec![T::zero(); pixels * c];
    let mut dv = vec![T::zero(); pixels * c];
    for (p, chunk) in dkv.chunks(2 * c).enumerate() {
        dk[p * c..(p + 1) * c].copy_from_slice(&chunk[..c]);
        dv[p * c..(p + 1) * c].copy_from_slice(&chunk[c..]);
    }

    let weight_grad = |d: &[T]| {
        let mut g = Tensor::zeros(&[c, spec.c_in]);
        gemm(d, &cache.x_pixels, g.data_mut(), c, pixels, spec.c_in, true, false);
        g
    };
    let dw_q = weight_grad(&dq);
    let dw_k = weight_grad(&dk);
    let dw_v = weight_grad(&dv);

    let mut dx_pixels = vec![T::zero(); pixels * spec.c_in];
    for (d, w) in [(&dq, &weights.w_q), (&dk, &weights.w_k), (&dv, &weights.w_v)] {
        let mut part = vec![T::zero(); pixels * spec.c_in];
        gemm(d, w.data(), &mut part, pixels, c, spec.c_in, false, false);
        for (acc, p) in dx_pixels.iter_mut().zip(part) {
            *acc += p;
        }
    }

    let half = spec.half();
    let mut de_row = Tensor::zeros(&[half, spec.window_h]);
    let mut de_col = Tensor::zeros(&[half, spec.window_w]);
    for a in 0..spec.window_h {
        for b in 0..spec.window_w {
            let o = a * spec.window_w + b;
            for ch in 0..half {
                de_col.data_mut()[ch * spec.window_w + b] += de[o * c + ch];
                de_row.data_mut()[ch * spec.window_h + a] += de[o * c + half + ch];
            }
        }
    }

    Ok(AttentionGrads {
        dx: from_pixels(&dx_pixels, Shape4 { c: spec.c_in, ..s }),
        weights: AttentionWeights {
            w_q: dw_q,
            w_k: dw_k,
            w_v: dw_v,
            e_row: de_row,
            e_col: de_col,
        },
    })
}
