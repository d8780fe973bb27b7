//! Pooling with indices, unpooling, the linear layer and the two training
//! losses, each with its backward rule.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm, sigmoid, Float, Shape4, Tensor};

/// Smoothing constant of the soft dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// Argmax positions recorded by [`maxpool2d`].
///
/// One entry per pooled output element: the row-major index of the selected
/// pixel within its own `H×W` input plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub pooled: Shape4,
    pub input: Shape4,
    pub kernel: usize,
    pub stride: usize,
    pub indices: Vec<usize>,
}

impl PoolIndices {
    /// Checks that every index lies inside its own pooling window.
    pub fn validate(&self) -> Result<()> {
        let (ph, pw) = (self.pooled.h, self.pooled.w);
        if self.indices.len() != self.pooled.numel() {
            return Err(Error::Corruption {
                op: "pool indices".into(),
                detail: format!("{} indices for {} outputs", self.indices.len(), self.pooled.numel()),
            });
        }
        for (e, &idx) in self.indices.iter().enumerate() {
            let oi = (e / pw) % ph;
            let oj = e % pw;
            let (r, c) = (idx / self.input.w, idx % self.input.w);
            let inside = r >= oi * self.stride
                && r < oi * self.stride + self.kernel
                && c >= oj * self.stride
                && c < oj * self.stride + self.kernel
                && r < self.input.h;
            if !inside {
                return Err(Error::Corruption {
                    op: "pool indices".into(),
                    detail: format!("index {idx} of output {e} lies outside its window"),
                });
            }
        }
        Ok(())
    }
}

/// Output extent of a pooling window sweep; errors when the input does not
/// tile exactly.
fn pooled_extent(extent: usize, k: usize, stride: usize, what: &str) -> Result<usize> {
    if k == 0 || stride == 0 || extent < k || !(extent - k).is_multiple_of(stride) {
        return Err(Error::shape(
            "maxpool2d",
            format!("{what} {extent} is not divisible into windows of {k} with stride {stride}"),
        ));
    }
    Ok((extent - k) / stride + 1)
}

/// Max pooling; ties resolve to the first position in row-major scan order.
pub fn maxpool2d<T: Float>(x: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, PoolIndices)> {
    let s = Shape4::of(x)?;
    let oh = pooled_extent(s.h, k, stride, "height")?;
    let ow = pooled_extent(s.w, k, stride, "width")?;
    let pooled = Shape4 { h: oh, w: ow, ..s };
    let mut y = Tensor::zeros(&pooled.dims());
    let mut indices = vec![0usize; pooled.numel()];
    let plane_in = s.h * s.w;
    let plane_out = oh * ow;
    let xd = x.data();
    for nc in 0..s.n * s.c {
        let src = &xd[nc * plane_in..(nc + 1) * plane_in];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = oi * stride * s.w + oj * stride;
                for r in oi * stride..oi * stride + k {
                    for c in oj * stride..oj * stride + k {
                        let at = r * s.w + c;
                        if src[at] > src[best] {
                            best = at;
                        }
                    }
                }
                let e = nc * plane_out + oi * ow + oj;
                y.data_mut()[e] = src[best];
                indices[e] = best;
            }
        }
    }
    Ok((
        y,
        PoolIndices {
            pooled,
            input: s,
            kernel: k,
            stride,
            indices,
        },
    ))
}

/// Routes each pooled gradient to its recorded argmax.
pub fn maxpool2d_backward<T: Float>(dy: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    if dy.shape() != idx.pooled.dims() {
        return Err(Error::shape("maxpool2d backward", format!("{:?} vs {:?}", dy.shape(), idx.pooled)));
    }
    let mut dx = Tensor::zeros(&idx.input.dims());
    scatter(dy.data(), idx, dx.data_mut());
    Ok(dx)
}

fn scatter<T: Float>(values: &[T], idx: &PoolIndices, out: &mut [T]) {
    let plane_in = idx.input.h * idx.input.w;
    let plane_out = idx.pooled.h * idx.pooled.w;
    for (e, (&v, &i)) in values.iter().zip(&idx.indices).enumerate() {
        out[(e / plane_out) * plane_in + i] += v;
    }
}

/// Scatters pooled values back to the argmax positions; everything else is zero.
pub fn maxunpool2d<T: Float>(y: &Tensor<T>, idx: &PoolIndices, out_shape: Shape4) -> Result<Tensor<T>> {
    if y.shape() != idx.pooled.dims() {
        return Err(Error::shape(
            "maxunpool2d",
            format!("values {:?} do not match indices {:?}", y.shape(), idx.pooled.dims()),
        ));
    }
    if out_shape.n != idx.pooled.n || out_shape.c != idx.pooled.c {
        return Err(Error::shape(
            "maxunpool2d",
            format!("output {out_shape:?} inconsistent with pooled {:?}", idx.pooled),
        ));
    }
    let plane = out_shape.h * out_shape.w;
    if let Some(&bad) = idx.indices.iter().find(|&&i| i >= plane) {
        return Err(Error::Corruption {
            op: "maxunpool2d".into(),
            detail: format!("index {bad} outside a {}x{} plane", out_shape.h, out_shape.w),
        });
    }
    let mut out = Tensor::zeros(&out_shape.dims());
    let target = PoolIndices {
        input: out_shape,
        ..idx.clone()
    };
    scatter(y.data(), &target, out.data_mut());
    Ok(out)
}

/// Gathers the gradient at the recorded positions.
pub fn maxunpool2d_backward<T: Float>(dout: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    let s = Shape4::of(dout)?;
    let plane_in = s.h * s.w;
    let plane_out = idx.pooled.h * idx.pooled.w;
    let d = dout.data();
    let data = idx
        .indices
        .iter()
        .enumerate()
        .map(|(e, &i)| d[(e / plane_out) * plane_in + i])
        .collect();
    Tensor::new(&idx.pooled.dims(), data)
}

fn linear_dims<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape(), b.shape()) {
        (&[n, d_in], &[d_out, d_in2], &[d_out2]) if d_in == d_in2 && d_out == d_out2 => Ok((n, d_in, d_out)),
        (xs, ws, bs) => Err(Error::shape(
            "linear",
            format!("x {xs:?}, W {ws:?}, b {bs:?} do not agree"),
        )),
    }
}

/// `y = x·Wᵀ + b` for `x: N×d_in`, `W: d_out×d_in`.
pub fn linear<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d_in, d_out) = linear_dims(x, w, b)?;
    let mut y = Tensor::zeros(&[n, d_out]);
    gemm(x.data(), w.data(), y.data_mut(), n, d_in, d_out, false, true);
    for row in y.data_mut().chunks_mut(d_out.max(1)) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(y)
}

pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn linear_backward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (n, d_in) = (x.dim(0), x.dim(1));
    let d_out = w.dim(0);
    if dy.shape() != [n, d_out] {
        return Err(Error::shape("linear backward", format!("{:?}", dy.shape())));
    }
    let mut dx = Tensor::zeros(&[n, d_in]);
    gemm(dy.data(), w.data(), dx.data_mut(), n, d_out, d_in, false, false);
    let mut dw = Tensor::zeros(&[d_out, d_in]);
    gemm(dy.data(), x.data(), dw.data_mut(), d_out, n, d_in, true, false);
    let mut db = Tensor::zeros(&[d_out]);
    for row in dy.data().chunks(d_out.max(1)) {
        for (acc, &g) in db.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

fn check_binary<T: Float>(t: &Tensor<T>, op: &str) -> Result<()> {
    match t.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(Error::contract(op, format!("target value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Mean binary cross-entropy on logits, evaluated as
/// `max(z,0) − z·t + ln(1 + e^{−|z|})`.
pub fn bce_loss<T: Float>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    logits.expect_same_shape(targets, "bce_loss")?;
    check_binary(targets, "bce_loss")?;
    if logits.is_empty() {
        return Err(Error::Empty("bce_loss on an empty batch".into()));
    }
    let total: T = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / T::of(logits.len() as f64))
}

pub fn bce_loss_backward<T: Float>(logits: &Tensor<T>, targets: &Tensor<T>) -> Tensor<T> {
    let scale = T::one() / T::of(logits.len() as f64);
    let mut g = logits.map(sigmoid);
    for (v, &t) in g.data_mut().iter_mut().zip(targets.data()) {
        *v = (*v - t) * scale;
    }
    g
}

fn dice_terms<T: Float>(p: &[T], g: &[T]) -> (T, T) {
    let eps = T::of(DICE_EPS);
    let mut inter = T::zero();
    let mut den = eps;
    for (&pv, &gv) in p.iter().zip(g) {
        inter += pv * gv;
        den += pv * pv + gv * gv;
    }
    (T::of(2.0) * inter + eps, den)
}

fn batch_rows<T: Float>(pred: &Tensor<T>) -> Result<(usize, usize)> {
    let n = *pred
        .shape()
        .first()
        .ok_or_else(|| Error::shape("soft_dice_loss", "scalar prediction"))?;
    if n == 0 {
        return Err(Error::Empty("soft_dice_loss on an empty batch".into()));
    }
    Ok((n, pred.len() / n))
}

/// `1 − (2Σpg + ε)/(Σp² + Σg² + ε)` per sample, averaged over the batch
/// (leading) axis.
pub fn soft_dice_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.expect_same_shape(target, "soft_dice_loss")?;
    check_binary(target, "soft_dice_loss")?;
    if let Some(v) = pred.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::contract("soft_dice_loss", format!("prediction {v} outside [0, 1]")));
    }
    let (n, m) = batch_rows(pred)?;
    let total: T = (0..n)
        .map(|i| {
            let (num, den) = dice_terms(&pred.data()[i * m..(i + 1) * m], &target.data()[i * m..(i + 1) * m]);
            T::one() - num / den
        })
        .sum();
    Ok(total / T::of(n as f64))
}

pub fn soft_dice_loss_backward<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = batch_rows(pred)?;
    let two = T::of(2.0);
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = Tensor::zeros(pred.shape());
    for i in 0..n {
        let p = &pred.data()[i * m..(i + 1) * m];
        let g = &target.data()[i * m..(i + 1) * m];
        let (num, den) = dice_terms(p, g);
        let out = &mut grad.data_mut()[i * m..(i + 1) * m];
        for ((o, &pv), &gv) in out.iter_mut().zip(p).zip(g) {
            *o = -(two * gv * den - num * two * pv) / (den * den) * inv_n;
        }
    }
    Ok(grad)
}

/// Hard Dice similarity coefficient of thresholded predictions, averaged per
/// sample. Two empty masks score 1.
pub fn dice_coefficient<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, threshold: T) -> Result<f64> {
    pred.expect_same_shape(target, "dice_coefficient")?;
    let (n, m) = batch_rows(pred)?;
    let scores = par::map_range(n, |i| {
        let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.data()[i * m..(i + 1) * m].iter().zip(&target.data()[i * m..(i + 1) * m]) {
            let pb = p > threshold;
            let gb = g > T::of(0.5);
            inter += (pb && gb) as usize;
            a += pb as usize;
            b += gb as usize;
        }
        if a + b == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (a + b) as f64
        }
    });
    Ok(scores.iter().sum::<f64>() / n as f64)
}
