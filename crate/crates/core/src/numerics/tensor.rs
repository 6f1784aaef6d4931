//! Dense row-major `f64` tensors and the raw kernels the autodiff graph is
//! built from. Everything here is a pure function of its inputs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("tensor shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose extents are already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    /// `self += c * other` for equal shapes.
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy on different shapes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::ShapeMismatch {
                op: "permute",
                lhs: self.shape.clone(),
                rhs: axes.to_vec(),
            });
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        for_each_offset(&out_shape, &src_strides, |off| out.push(self.data[off]));
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. Batch dims must agree,
    /// or one side may be a plain matrix shared across the other's batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        };
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (k2, n) = (rhs.shape[rhs.rank() - 2], rhs.shape[rhs.rank() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let lb = &self.shape[..self.rank() - 2];
        let rb = &rhs.shape[..rhs.rank() - 2];
        let batch_shape = if lb == rb || rb.is_empty() {
            lb.to_vec()
        } else if lb.is_empty() {
            rb.to_vec()
        } else {
            return Err(mismatch());
        };
        let batch: usize = batch_shape.iter().product();
        let lstep = if lb.is_empty() { 0 } else { m * k };
        let rstep = if rb.is_empty() { 0 } else { k * n };
        let mut out = vec![0.0; batch * m * n];
        for b in 0..batch {
            let a = &self.data[b * lstep..b * lstep + m * k];
            let bm = &rhs.data[b * rstep..b * rstep + k * n];
            let o = &mut out[b * m * n..(b + 1) * m * n];
            matmul_into(a, bm, o, m, k, n);
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        Ok(Tensor::from_parts(shape, out))
    }

    /// Elementwise binary op with numpy-style broadcasting over size-1 axes.
    pub fn zip_with(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == rhs.shape {
            let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor::from_parts(self.shape.clone(), data));
        }
        let out_shape = broadcast_shape(&self.shape, &rhs.shape).ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        })?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&rhs.shape, &out_shape);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for_each_offset2(&out_shape, &sa, &sb, |ia, ib| out.push(f(self.data[ia], rhs.data[ib])));
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Sums a broadcast result back down to `target` (the inverse of broadcasting).
    pub fn sum_to_shape(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        let st = broadcast_strides(target, &self.shape);
        let mut out = vec![0.0; target.iter().product()];
        let mut i = 0;
        for_each_offset(&self.shape, &st, |off| {
            out[off] += self.data[i];
            i += 1;
        });
        Tensor::from_parts(target.to_vec(), out)
    }

    /// Expands to `target` by repeating along size-1 (or missing leading) axes.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor> {
        match broadcast_shape(&self.shape, target) {
            Some(s) if s == target => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: self.shape.clone(),
                    rhs: target.to_vec(),
                })
            }
        }
        let st = broadcast_strides(&self.shape, target);
        let mut out = Vec::with_capacity(target.iter().product());
        for_each_offset(target, &st, |off| out.push(self.data[off]));
        Ok(Tensor::from_parts(target.to_vec(), out))
    }

    /// Selects `index` positions along `axis` (repeats allowed).
    pub fn gather(&self, axis: usize, index: &[usize]) -> Result<Tensor> {
        let bad = || Error::ShapeMismatch {
            op: "gather",
            lhs: self.shape.clone(),
            rhs: vec![axis, index.len()],
        };
        if axis >= self.rank() || index.is_empty() {
            return Err(bad());
        }
        let len = self.shape[axis];
        if index.iter().any(|&i| i >= len) {
            return Err(bad());
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let base = (o * len + i) * inner;
                out.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = index.len();
        Ok(Tensor::from_parts(shape, out))
    }

    /// Adjoint of [`Tensor::gather`]: accumulates rows of `self` into a tensor
    /// whose `axis` has extent `len`.
    pub fn scatter_add(&self, axis: usize, index: &[usize], len: usize) -> Tensor {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for (p, &i) in index.iter().enumerate() {
                let src = (o * index.len() + p) * inner;
                let dst = (o * len + i) * inner;
                for c in 0..inner {
                    out[dst + c] += self.data[src + c];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::from_parts(shape, out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(Error::config(format!("concat axis {axis} out of range")));
        }
        for p in parts {
            let same = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Softmax over the last axis, restricted to entries where `mask` is true
    /// (masked entries come out exactly zero). Rows are max-shifted first.
    pub fn masked_softmax(&self, mask: Option<&Mask>) -> Result<Tensor> {
        let n = *self.shape.last().ok_or_else(|| Error::NotScalar { shape: vec![] })?;
        if let Some(m) = mask {
            m.check_against(&self.shape)?;
        }
        let mut out = vec![0.0; self.numel()];
        for (r, (row, orow)) in self.data.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let allowed = |j: usize| mask.map_or(true, |m| m.get(r * n + j));
            let mx = (0..n).filter(|&j| allowed(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::config("softmax row with every entry masked"));
            }
            let mut z = 0.0;
            for j in 0..n {
                if allowed(j) {
                    let e = (row[j] - mx).exp();
                    orow[j] = e;
                    z += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= z;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// `x / sqrt(mean(x^2) + eps)` along the last axis.
    pub fn rmsnorm(&self, eps: f64) -> Result<Tensor> {
        let n = *self.shape.last().ok_or_else(|| Error::NotScalar { shape: vec![] })?;
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data.chunks(n) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            out.extend(row.iter().map(|x| x * r));
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }
}

/// Boolean mask whose shape is a trailing suffix of the tensor it gates;
/// leading axes of the gated tensor broadcast over it.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Entry for flat index `i` of the gated tensor.
    pub fn get(&self, i: usize) -> bool {
        self.data[i % self.data.len()]
    }

    fn check_against(&self, shape: &[usize]) -> Result<()> {
        if self.shape.len() > shape.len() || shape[shape.len() - self.shape.len()..] != self.shape[..] {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: shape.to_vec(),
                rhs: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn validate(&self, shape: &[usize]) -> Result<()> {
        self.check_against(shape)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

fn for_each_offset(shape: &[usize], st: &[usize], mut f: impl FnMut(usize)) {
    let n: usize = shape.iter().product();
    let r = shape.len();
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        f(off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn for_each_offset2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    let r = shape.len();
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        f(oa, ob);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
