//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every op eagerly as it is evaluated. Values are
//! immutable once recorded; [`Graph::grad`] walks the tape backwards into a
//! private gradient buffer, so a graph can be differentiated repeatedly.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::param::ParamSet;
use super::tensor::{Mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Silu(Var),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Softmax(Var),
    MaskedFill(Var, Rc<Mask>),
    RmsNorm(Var, f64),
    Gather(Var, usize, Rc<Vec<usize>>),
    Concat(Vec<Var>, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    live: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Parameters registered on a graph, addressable by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Merges two bindings; names in `other` shadow names in `self`.
    pub fn merged(mut self, other: &BoundParams) -> Self {
        for (k, v) in &other.vars {
            self.vars.insert(k.clone(), *v);
        }
        self
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn live(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].live
    }

    fn push(&self, value: Tensor, op: Op, live: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            live,
        });
        Var(nodes.len() - 1)
    }

    fn record(&self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let live = parents.iter().any(|&p| self.live(p));
        Ok(self.push(value, op, live))
    }

    /// A constant input; contributes no gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn variable(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn bind(&self, params: &ParamSet) -> BoundParams {
        self.bind_with(params, true)
    }

    /// Binds parameters as constants (no gradient is tracked through them).
    pub fn bind_frozen(&self, params: &ParamSet) -> BoundParams {
        self.bind_with(params, false)
    }

    fn bind_with(&self, params: &ParamSet, live: bool) -> BoundParams {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), self.push(t.clone(), Op::Leaf, live)))
            .collect();
        BoundParams { vars }
    }

    /// Value-identical copy that blocks gradient flow to everything upstream.
    pub fn detach(&self, x: Var) -> Var {
        let value = self.value(x);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            live: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(&self.value(b), "add", |x, y| x + y)?;
        self.record("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(&self.value(b), "sub", |x, y| x - y)?;
        self.record("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(&self.value(b), "mul", |x, y| x * y)?;
        self.record("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(&self.value(b), "div", |x, y| x / y)?;
        self.record("div", v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.record("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn offset(&self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.record("offset", v, Op::Offset(a), &[a])
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.record("exp", v, Op::Exp(a), &[a])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.record("silu", v, Op::Silu(a), &[a])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(&self.value(b))?;
        self.record("matmul", v, Op::Matmul(a, b), &[a, b])
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        self.record("permute", v, Op::Permute(a, axes.to_vec()), &[a])
    }

    pub fn transpose_last(&self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: self.shape(a),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.record("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.record("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.record("mean", v, Op::Mean(a), &[a])
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().ok_or_else(|| Error::NotScalar { shape: vec![] })?;
        let data: Vec<f64> = t.data().chunks(n).map(|c| c.iter().sum()).collect();
        let mut shape = t.shape()[..t.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let v = Tensor::new(shape, data)?;
        self.record("sum_last", v, Op::SumLast(a), &[a])
    }

    pub fn softmax(&self, a: Var) -> Result<Var> {
        let v = self.value(a).masked_softmax(None)?;
        self.record("softmax", v, Op::Softmax(a), &[a])
    }

    /// Softmax over the last axis restricted to `mask`-true entries; masked
    /// entries are exactly zero, matching an additive `-inf` mask.
    pub fn masked_softmax(&self, a: Var, mask: Rc<Mask>) -> Result<Var> {
        let v = self.value(a).masked_softmax(Some(&mask))?;
        self.record("masked_softmax", v, Op::Softmax(a), &[a])
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&self, a: Var, mask: Rc<Mask>, fill: f64) -> Result<Var> {
        let t = self.value(a);
        mask.validate(t.shape())?;
        let data = t.data().iter().enumerate().map(|(i, &x)| if mask.get(i) { fill } else { x }).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.record("masked_fill", v, Op::MaskedFill(a, mask), &[a])
    }

    pub fn rmsnorm(&self, a: Var, eps: f64) -> Result<Var> {
        let v = self.value(a).rmsnorm(eps)?;
        self.record("rmsnorm", v, Op::RmsNorm(a, eps), &[a])
    }

    pub fn gather(&self, a: Var, axis: usize, index: Rc<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).gather(axis, &index)?;
        self.record("gather", v, Op::Gather(a, axis, index), &[a])
    }

    /// Contiguous slice `start..end` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.gather(a, axis, Rc::new((start..end).collect()))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|t| t.as_ref()).collect();
        let v = Tensor::concat(&refs, axis)?;
        self.record("concat", v, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// `x · Wᵀ` for a weight stored as `[out, in]`.
    pub fn linear(&self, x: Var, weight: Var) -> Result<Var> {
        let wt = self.transpose_last(weight)?;
        self.matmul(x, wt)
    }

    /// Reverse sweep from a scalar output. Returns gradients for every
    /// recorded node; constants and unreachable nodes read as zero.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.0].value.shape().to_vec();
        if nodes[output.0].value.numel() != 1 {
            return Err(Error::NotScalar { shape: out_shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(&out_shape));

        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if !node.live {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let val = |v: Var| nodes[v.0].value.clone();
            let live = |v: Var| nodes[v.0].live;
            let mut acc = |v: Var, t: Tensor| {
                if !live(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => e.axpy(1.0, &t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.sum_to_shape(val(*a).shape()));
                    acc(*b, g.sum_to_shape(val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, g.sum_to_shape(val(*a).shape()));
                    acc(*b, g.scale(-1.0).sum_to_shape(val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if live(*a) {
                        acc(*a, g.zip_with(&vb, "mul", |x, y| x * y)?.sum_to_shape(va.shape()));
                    }
                    if live(*b) {
                        acc(*b, g.zip_with(&va, "mul", |x, y| x * y)?.sum_to_shape(vb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if live(*a) {
                        acc(*a, g.zip_with(&vb, "div", |x, y| x / y)?.sum_to_shape(va.shape()));
                    }
                    if live(*b) {
                        let y = &node.value;
                        let gy = g.zip_with(y, "div", |x, y| x * y)?;
                        acc(*b, gy.zip_with(&vb, "div", |x, y| -x / y)?.sum_to_shape(vb.shape()));
                    }
                }
                Op::Scale(a, c) => acc(*a, g.scale(*c)),
                Op::Offset(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, g.zip_with(&node.value, "exp", |x, y| x * y)?),
                Op::Silu(a) => {
                    let d = val(*a).map(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    acc(*a, g.zip_with(&d, "silu", |x, y| x * y)?);
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if live(*a) {
                        let ga = g.matmul(&vb.transpose_last()?)?;
                        acc(*a, reduce_batch(ga, va.shape()));
                    }
                    if live(*b) {
                        let gb = va.transpose_last()?.matmul(&g)?;
                        acc(*b, reduce_batch(gb, vb.shape()));
                    }
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    acc(*a, g.permute(&inv)?);
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Mean(a) => {
                    let va = val(*a);
                    acc(*a, Tensor::full(va.shape(), g.item() / va.numel() as f64));
                }
                Op::SumLast(a) => {
                    let va = val(*a);
                    let n = *va.shape().last().unwrap();
                    let data = g.data().iter().flat_map(|&x| std::iter::repeat(x).take(n)).collect();
                    acc(*a, Tensor::from_parts(va.shape().to_vec(), data));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let mut out = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                    }
                    acc(*a, Tensor::from_parts(y.shape().to_vec(), out));
                }
                Op::MaskedFill(a, mask) => {
                    let data = g.data().iter().enumerate().map(|(i, &x)| if mask.get(i) { 0.0 } else { x }).collect();
                    acc(*a, Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::RmsNorm(a, eps) => {
                    let x = val(*a);
                    let n = *x.shape().last().unwrap();
                    let mut out = Vec::with_capacity(x.numel());
                    for (xr, gr) in x.data().chunks(n).zip(g.data().chunks(n)) {
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
                        let r = 1.0 / (ms + eps).sqrt();
                        let gx: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let c = r * r * r * gx / n as f64;
                        out.extend(xr.iter().zip(gr).map(|(x, g)| r * g - c * x));
                    }
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), out));
                }
                Op::Gather(a, axis, index) => {
                    let len = val(*a).shape()[*axis];
                    acc(*a, g.scatter_add(*axis, index, len));
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for p in parts {
                        let len = val(*p).shape()[*axis];
                        let idx: Vec<usize> = (start..start + len).collect();
                        acc(*p, g.gather(*axis, &idx)?);
                        start += len;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient of a scalar output with respect to each bound parameter.
    pub fn grad(&self, output: Var, params: &BoundParams) -> Result<ParamSet> {
        let grads = self.backward(output)?;
        let mut out = ParamSet::new();
        for (name, v) in params.iter() {
            out.insert(name, grads.wrt(self, v));
        }
        Ok(out)
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when `v` did not influence the output.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&graph.shape(v)))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sums leading batch axes when a broadcast matrix operand was shared.
fn reduce_batch(g: Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g;
    }
    let (m, n) = (target[target.len() - 2], target[target.len() - 1]);
    let mut out = vec![0.0; m * n];
    for chunk in g.data().chunks(m * n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}
