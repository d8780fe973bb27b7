//! Dense row-major n-dimensional arrays.
//!
//! Activations use the NCHW layout. Only scalar broadcasting is supported:
//! binary elementwise ops require identical shapes.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Element kinds a tensor (and an archive record) can hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemKind {
    Float32,
    Float64,
    Int8,
    Int32,
}

impl ElemKind {
    pub fn size_bytes(self) -> usize {
        match self {
            ElemKind::Float32 | ElemKind::Int32 => 4,
            ElemKind::Float64 => 8,
            ElemKind::Int8 => 1,
        }
    }
}

pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const KIND: ElemKind;
}

impl Element for f32 {
    const KIND: ElemKind = ElemKind::Float32;
}
impl Element for f64 {
    const KIND: ElemKind = ElemKind::Float64;
}
impl Element for i8 {
    const KIND: ElemKind = ElemKind::Int8;
}
impl Element for i32 {
    const KIND: ElemKind = ElemKind::Int32;
}

/// Floating point element: f32 for training and inference, f64 for oracles
/// and gradient checks.
pub trait Float:
    Element
    + num_traits::Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Display
{
    /// Conversion from an f64 literal or parameter.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Float for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 16;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}...", &self.data[..SHOWN])
        }
    }
}

/// Canonical activation extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "Shape4",
                format!("extents must be >= 1, got {n}x{c}x{h}x{w}"),
            ));
        }
        Ok(Self { n, c, h, w })
    }

    pub fn of<T>(t: &Tensor<T>) -> Result<Self> {
        match t.shape.as_slice() {
            &[n, c, h, w] => Self::new(n, c, h, w),
            s => Err(Error::shape("Shape4", format!("expected rank 4, got {s:?}"))),
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::default())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn elem_kind(&self) -> ElemKind {
        T::KIND
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// Number of elements in one step along `axis` (product of trailing extents).
    fn inner_stride(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::shape(
                "slice",
                format!(
                    "range {start}..{} on axis {axis} of {:?}",
                    start + len,
                    self.shape
                ),
            ));
        }
        let inner = self.inner_stride(axis);
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = match self.shape.as_slice() {
            &[r, c] => (r, c),
            s => return Err(Error::shape("transpose", format!("expected rank 2, got {s:?}"))),
        };
        let mut data = vec![T::default(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }
}

impl<T: Float> Tensor<T> {
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        self.map(|v| U::of(v.as_f64()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> Option<(T, T)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}

/// Concatenate along `axis`. All other extents must agree.
pub fn concat<T: Element>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat", "no operands"))?;
    if axis >= first.rank() {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} out of range for rank {}", first.rank()),
        ));
    }
    for x in xs {
        let compatible = x.rank() == first.rank()
            && x
                .shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(a, (p, q))| a == axis || p == q);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("{:?} incompatible with {:?} on axis {axis}", x.shape, first.shape),
            ));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner = first.inner_stride(axis);
    let total: usize = xs.iter().map(|x| x.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let run = x.shape[axis] * inner;
            data.extend_from_slice(&x.data[o * run..(o + 1) * run]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

fn matrix_dims<T>(t: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// Row-major product `a · b` of an m×k and a k×n matrix.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul")?;
    let (k2, n) = matrix_dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {m}x{k} · {k2}x{n}"),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(a.data(), b.data(), out.data_mut(), m, k, n, false, false);
    Ok(out)
}

/// `c = op(a) · op(b)` with optional transposition of either operand.
///
/// `a` is m×k (or k×m when `trans_a`), `b` is k×n (or n×k when `trans_b`).
/// Rows of `c` are computed independently; each element accumulates over
/// `k` in ascending order, so the result does not depend on thread count.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Float>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    par::for_each_chunk_mut(c, n, |i, row| {
        row.iter_mut().for_each(|v| *v = T::zero());
        if trans_b {
            for (j, out) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for p in 0..k {
                    let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                    acc += av * b[j * k + p];
                }
                *out = acc;
            }
        } else {
            for p in 0..k {
                let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (out, &bv) in row.iter_mut().zip(brow) {
                    *out += av * bv;
                }
            }
        }
    });
}

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for rank {}", x.rank()),
        ));
    }
    let extent = x.shape[axis];
    let inner = x.inner_stride(axis);
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    let mut row = vec![T::zero(); extent];
    for o in 0..outer {
        for i in 0..inner {
            let at = |e: usize| (o * extent + e) * inner + i;
            for (e, r) in row.iter_mut().enumerate() {
                *r = x.data[at(e)];
            }
            softmax_in_place(&mut row);
            for (e, &r) in row.iter().enumerate() {
                out.data[at(e)] = r;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// The elementwise operations of the kit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Scale(f64),
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

pub fn elementwise<T: Float>(op: Elementwise, x: &Tensor<T>, y: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match (op, y) {
        (Elementwise::Add, Some(y)) => x.zip_with(y, "add", |a, b| a + b),
        (Elementwise::Sub, Some(y)) => x.zip_with(y, "sub", |a, b| a - b),
        (Elementwise::Mul, Some(y)) => x.zip_with(y, "mul", |a, b| a * b),
        (Elementwise::Relu, None) => Ok(x.map(relu)),
        (Elementwise::Sigmoid, None) => Ok(x.map(sigmoid)),
        (Elementwise::Scale(s), None) => {
            let s = T::of(s);
            Ok(x.map(|v| v * s))
        }
        (op, _) => Err(Error::shape(
            "elementwise",
            format!(
                "{op:?} takes {} operand(s)",
                if op.is_binary() { 2 } else { 1 }
            ),
        )),
    }
}

pub(crate) fn relu<T: Float>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    // Both branches avoid exp overflow.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
