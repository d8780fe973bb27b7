//! Reverse-mode differentiation over the kit's op set.
//!
//! A [`Tape`] records every op applied during a forward pass, in order. Ops
//! are coarse (a whole attention layer is one node) and carry their own
//! backward rule. [`Tape::backward`] walks the tape in reverse and returns
//! gradients for every named parameter; it does not mutate the tape, so it
//! can be called any number of times.

use std::collections::BTreeMap;

use crate::attention::{attention_backward, attention_forward_cached, from_pixels, to_pixels, AttentionCache, AttentionSpec, AttentionWeights};
use crate::error::{Error, Result};
use crate::layers::{
    bce_loss, bce_loss_backward, linear, linear_backward, maxpool2d, maxpool2d_backward, maxunpool2d,
    maxunpool2d_backward, soft_dice_loss, soft_dice_loss_backward, PoolIndices,
};
use crate::tensor::{concat, relu, sigmoid, Float, Shape4, Tensor};

/// Named parameter tensors.
pub type ParamSet<T> = BTreeMap<String, Tensor<T>>;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(String),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    /// Per-pixel linear map over channels (a 1×1 convolution with bias).
    Project {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention {
        x: Var,
        params: [Var; 5],
        spec: AttentionSpec,
        cache: Box<AttentionCache<T>>,
    },
    MaxPool {
        x: Var,
        indices: PoolIndices,
    },
    MaxUnpool {
        y: Var,
        indices: PoolIndices,
    },
    Bce {
        logits: Var,
        targets: Tensor<T>,
    },
    SoftDice {
        pred: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of the loss with respect to every parameter on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub params: ParamSet<T>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A constant that receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Var {
        self.push(t, Op::Param(name.into()))
    }

    /// Pool indices recorded by a max-pool node.
    pub fn pool_indices(&self, v: Var) -> Option<&PoolIndices> {
        match &self.nodes[v.0].op {
            Op::MaxPool { indices, .. } => Some(indices),
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(relu);
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        let n = *s.first().ok_or_else(|| Error::shape("flatten", "scalar input"))?;
        let rest = s[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let v = concat(&vals, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    pub fn project(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = Shape4::of(xv)?;
        let pixels = Tensor::new(&[s.n * s.h * s.w, s.c], to_pixels(xv))?;
        let out = linear(&pixels, self.value(w), self.value(b))?;
        let c_out = out.dim(1);
        let v = from_pixels(out.data(), Shape4 { c: c_out, ..s });
        Ok(self.push(v, Op::Project { x, w, b }))
    }

    /// `params` are `[w_q, w_k, w_v, e_row, e_col]`.
    pub fn attention(&mut self, x: Var, spec: &AttentionSpec, params: [Var; 5]) -> Result<Var> {
        let weights = AttentionWeights {
            w_q: self.value(params[0]).clone(),
            w_k: self.value(params[1]).clone(),
            w_v: self.value(params[2]).clone(),
            e_row: self.value(params[3]).clone(),
            e_col: self.value(params[4]).clone(),
        };
        let (v, cache) = attention_forward_cached(self.value(x), spec, &weights)?;
        Ok(self.push(
            v,
            Op::Attention {
                x,
                params,
                spec: *spec,
                cache: Box::new(cache),
            },
        ))
    }

    pub fn maxpool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (v, indices) = maxpool2d(self.value(x), k, stride)?;
        Ok(self.push(v, Op::MaxPool { x, indices }))
    }

    /// Unpools `y` with the indices recorded by the max-pool node `pool`.
    pub fn maxunpool(&mut self, y: Var, pool: Var) -> Result<Var> {
        let indices = self
            .pool_indices(pool)
            .ok_or_else(|| Error::contract("maxunpool", "index source is not a max-pool node"))?
            .clone();
        let v = maxunpool2d(self.value(y), &indices, indices.input)?;
        Ok(self.push(v, Op::MaxUnpool { y, indices }))
    }

    pub fn bce(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let l = bce_loss(self.value(logits), &targets)?;
        Ok(self.push(Tensor::scalar(l), Op::Bce { logits, targets }))
    }

    pub fn soft_dice(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let l = soft_dice_loss(self.value(pred), &target)?;
        Ok(self.push(Tensor::scalar(l), Op::SoftDice { pred, target }))
    }

    /// Gradients of the scalar `loss` with respect to every parameter
    /// recorded on the tape. Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Param(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_backward(node, &g)? {
                accumulate(&mut grads[input.0], contribution)?;
            }
        }

        let mut params = ParamSet::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match params.get_mut(name) {
                    Some(existing) => *existing = existing.zip_with(&g, "param gradient", |a, b| a + b)?,
                    None => {
                        params.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(Gradients { params })
    }

    fn local_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, g.zip_with(val(*b), "mul backward", |x, y| x * y)?),
                (*b, g.zip_with(val(*a), "mul backward", |x, y| x * y)?),
            ],
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::Relu(a) => vec![(
                *a,
                g.zip_with(val(*a), "relu backward", |d, x| if x > T::zero() { d } else { T::zero() })?,
            )],
            Op::Sigmoid(a) => vec![(
                *a,
                g.zip_with(&node.value, "sigmoid backward", |d, s| d * s * (T::one() - s))?,
            )],
            Op::Sum(a) => {
                let d = g.item()?;
                vec![(*a, Tensor::full(val(*a).shape(), d))]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let len = val(v).dim(*axis);
                    out.push((v, g.slice(*axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Linear { x, w, b } => {
                let lg = linear_backward(val(*x), val(*w), g)?;
                vec![(*x, lg.dx), (*w, lg.dw), (*b, lg.db)]
            }
            Op::Project { x, w, b } => {
                let xv = val(*x);
                let s = Shape4::of(xv)?;
                let rows = s.n * s.h * s.w;
                let pixels = Tensor::new(&[rows, s.c], to_pixels(xv))?;
                let gp = Tensor::new(&[rows, g.dim(1)], to_pixels(g))?;
                let lg = linear_backward(&pixels, val(*w), &gp)?;
                vec![(*x, from_pixels(lg.dx.data(), s)), (*w, lg.dw), (*b, lg.db)]
            }
            Op::Attention { x, params, spec, cache } => {
                let weights = AttentionWeights {
                    w_q: val(params[0]).clone(),
                    w_k: val(params[1]).clone(),
                    w_v: val(params[2]).clone(),
                    e_row: val(params[3]).clone(),
                    e_col: val(params[4]).clone(),
                };
                let ag = attention_backward(spec, &weights, cache, g)?;
                let w = ag.weights;
                vec![
                    (*x, ag.dx),
                    (params[0], w.w_q),
                    (params[1], w.w_k),
                    (params[2], w.w_v),
                    (params[3], w.e_row),
                    (params[4], w.e_col),
                ]
            }
            Op::MaxPool { x, indices } => vec![(*x, maxpool2d_backward(g, indices)?)],
            Op::MaxUnpool { y, indices } => vec![(*y, maxunpool2d_backward(g, indices)?)],
            Op::Bce { logits, targets } => {
                let d = g.item()?;
                vec![(*logits, bce_loss_backward(val(*logits), targets).map(|v| v * d))]
            }
            Op::SoftDice { pred, target } => {
                let d = g.item()?;
                vec![(*pred, soft_dice_loss_backward(val(*pred), target)?.map(|v| v * d))]
            }
        })
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(acc) => acc.zip_with(&g, "gradient accumulation", |a, b| a + b)?,
    });
    Ok(())
}

/// Largest relative discrepancy between the tape gradient and central finite
/// differences of the scalar function built by `f` around `x`.
///
/// `f` receives a fresh tape and a parameter variable holding `x`; the error
/// per coordinate is `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param("x", t.clone());
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let v = tape.param("x", x.clone());
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.params.remove("x").expect("x is a parameter");

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::numeric(
                format!("grad_check coordinate {i}"),
                format!("analytic {a}, numeric {numeric}"),
            ));
        }
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step<T: Float>(params: &mut ParamSet<T>, grads: &Gradients<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else {
            continue;
        };
        p.expect_same_shape(g, "adam_step")?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        p.expect_same_shape(m, "adam_step")?;
        p.expect_same_shape(v, "adam_step")?;
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (tc1, tc2) = (T::of(c1), T::of(c2));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = tb1 * *mv + (T::one() - tb1) * gv;
            *vv = tb2 * *vv + (T::one() - tb2) * gv * gv;
            let mhat = *mv / tc1;
            let vhat = *vv / tc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
