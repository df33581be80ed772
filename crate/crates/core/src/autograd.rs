//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constant inputs, differentiable inputs, or parameters drawn from a
//! [`ParamStore`](crate::params::ParamStore). Every operation evaluates
//! eagerly and records enough information to push gradients back to its
//! parents when [`Graph::backward`] is called.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Elementwise maximum; ties send the gradient to the first argument.
    Maximum(Var, Var),
    Scale(Var, f64),
    /// `x[c, ..] + b[c]`
    AddBias(Var, Var),
    MatMul(Var, Var),
    /// `W[m,k] · x[k]`
    MatVec(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    /// `out[c,t,i] = Σ_k mix[i,k] · x[c,t,k]`
    NodeMix(Var, Arc<Tensor>),
    /// `out[c,p] = x[c,p] · m[p]`
    MaskMul(Var, Var),
    MeanPool(Var),
    MaxPool(Var, Vec<usize>),
    MaxOverTime(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    SoftmaxRows(Var),
    L2Normalize(Var, f64),
    RepeatCols(Var),
    Slice(Var, usize),
    Sum(Var),
    CrossEntropy(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// A single-use computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output positions `o` with `0 <= o*stride + k - pad < len`.
fn valid_range(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + k - pad <= len - 1
    let hi_num = len as isize - 1 + pad as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Shape bookkeeping for a strided, zero-padded 2-D convolution.
struct ConvGeom {
    ci: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl ConvGeom {
    /// Unfolds `x[ci,h,wd]` into rows `(c,ky,kx)` of length `ho*wo`; padding reads as zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let mut cols = vec![0.0; self.ci * self.kh * self.kw * n];
        self.for_each_row(|r, c, ky, kx, (oy0, oy1), (ox0, ox1)| {
            let row = &mut cols[r * n..(r + 1) * n];
            for oy in oy0..oy1 {
                let iy = oy * self.stride.0 + ky - self.pad.0;
                let src = &x[(c * self.h + iy) * self.wd..(c * self.h + iy + 1) * self.wd];
                let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                if self.stride.1 == 1 {
                    let off = ox0 + kx - self.pad.1;
                    dst[ox0..ox1].copy_from_slice(&src[off..off + (ox1 - ox0)]);
                } else {
                    for ox in ox0..ox1 {
                        dst[ox] = src[ox * self.stride.1 + kx - self.pad.1];
                    }
                }
            }
        });
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters column gradients back onto the input.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let mut x = vec![0.0; self.ci * self.h * self.wd];
        self.for_each_row(|r, c, ky, kx, (oy0, oy1), (ox0, ox1)| {
            let row = &cols[r * n..(r + 1) * n];
            for oy in oy0..oy1 {
                let iy = oy * self.stride.0 + ky - self.pad.0;
                let base = (c * self.h + iy) * self.wd;
                let src = &row[oy * self.wo..(oy + 1) * self.wo];
                for ox in ox0..ox1 {
                    x[base + ox * self.stride.1 + kx - self.pad.1] += src[ox];
                }
            }
        });
        x
    }

    fn for_each_row(
        &self,
        mut f: impl FnMut(usize, usize, usize, usize, (usize, usize), (usize, usize)),
    ) {
        let mut r = 0;
        for c in 0..self.ci {
            for ky in 0..self.kh {
                let ys = valid_range(self.h, self.ho, ky, self.stride.0, self.pad.0);
                for kx in 0..self.kw {
                    let xs = valid_range(self.wd, self.wo, kx, self.stride.1, self.pad.1);
                    f(r, c, ky, kx, ys, xs);
                    r += 1;
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A parameter leaf. Frozen parameters (`trainable == false`) still
    /// take part in the forward pass but receive no gradient.
    pub fn param(&mut self, id: ParamId, value: &Tensor, trainable: bool) -> Var {
        self.push(value.clone(), Op::Param(id), trainable)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "maximum")?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x.max(*y))
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Maximum(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Adds `b[c]` to every element of channel `c` of `x` (`x` has `b.len()` leading rows).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let c = bv.len();
        if bv.ndim() != 1 || xv.ndim() == 0 || xv.shape()[0] != c {
            return Err(Error::shape(format!(
                "bias {:?} does not match {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let inner = xv.len() / c.max(1);
        let mut out = xv.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let bias = bv.data()[ch];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} · {k2}x{n}")));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, k) = self.value(w).dims2()?;
        let xv = self.value(x);
        if xv.ndim() != 1 || xv.len() != k {
            return Err(Error::shape(format!("matvec {m}x{k} · {:?}", xv.shape())));
        }
        let wd = self.value(w).data();
        let xd = xv.data();
        let out: Vec<f64> = (0..m).map(|i| dot(&wd[i * k..(i + 1) * k], xd)).collect();
        let ng = self.needs(w) || self.needs(x);
        Ok(self.push(Tensor::from_vec(out), Op::MatVec(w, x), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.needs(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// 2-D cross-correlation: `x[Ci,H,W]`, `w[Co,Ci,kh,kw]` → `[Co,Ho,Wo]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (ci, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [co, wci, kh, kw] = ws[..] else {
            return Err(Error::shape(format!("conv kernel must be 4-D, got {ws:?}")));
        };
        if wci != ci {
            return Err(Error::shape(format!(
                "conv kernel expects {wci} input channels, input has {ci}"
            )));
        }
        let (Some(ho), Some(wo)) = (
            conv_out(h, kh, stride.0, pad.0),
            conv_out(wd, kw, stride.1, pad.1),
        ) else {
            return Err(Error::shape(format!(
                "conv kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        };
        let geo = ConvGeom {
            ci,
            h,
            wd,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        };
        let cols = geo.im2col(self.value(x).data());
        let kd = self.value(w).data();
        let n = ho * wo;
        let kk = ci * kh * kw;
        let mut out = vec![0.0; co * n];
        for (o, orow) in out.chunks_mut(n).enumerate() {
            for (r, &wv) in kd[o * kk..(o + 1) * kk].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (y, &c) in orow.iter_mut().zip(&cols[r * n..(r + 1) * n]) {
                    *y += wv * c;
                }
            }
        }
        let out = Tensor::new(&[co, ho, wo], out)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }, ng))
    }

    /// Mixes the last axis of `x[C,T,V]` with a constant `V×V` matrix.
    pub fn node_mix(&mut self, x: Var, mix: Arc<Tensor>) -> Result<Var> {
        let (c, t, v) = self.value(x).dims3()?;
        let (r, k) = mix.dims2()?;
        if r != v || k != v {
            return Err(Error::shape(format!("node mix {r}x{k} against {v} nodes")));
        }
        let xd = self.value(x).data();
        let md = mix.data();
        let mut out = vec![0.0; c * t * v];
        for (orow, irow) in out.chunks_mut(v).zip(xd.chunks(v)) {
            for i in 0..v {
                let mrow = &md[i * v..(i + 1) * v];
                orow[i] = dot(mrow, irow);
            }
        }
        let out = Tensor::new(&[c, t, v], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::NodeMix(x, mix), ng))
    }

    /// Broadcast product of `x` with a spatial mask `m` whose length divides `x`.
    pub fn mask_mul(&mut self, x: Var, m: Var) -> Result<Var> {
        let xv = self.value(x);
        let mv = self.value(m);
        let p = mv.len();
        if p == 0 || !xv.len().is_multiple_of(p) {
            return Err(Error::shape(format!(
                "mask {:?} does not broadcast over {:?}",
                mv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(p) {
            for (o, w) in chunk.iter_mut().zip(mv.data()) {
                *o *= w;
            }
        }
        let ng = self.needs(x) || self.needs(m);
        Ok(self.push(out, Op::MaskMul(x, m), ng))
    }

    /// Mean over every axis but the first: `[C, ..] → [C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(Error::shape("mean pool needs at least 2 axes"));
        }
        let c = xv.shape()[0];
        let inner = xv.len() / c;
        let out: Vec<f64> = xv
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().sum::<f64>() / inner as f64)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_vec(out), Op::MeanPool(x), ng))
    }

    /// Max over every axis but the first: `[C, ..] → [C]`. Ties go to the first maximum.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(Error::shape("max pool needs at least 2 axes"));
        }
        let c = xv.shape()[0];
        let inner = xv.len() / c;
        let mut arg = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for (ch, chunk) in xv.data().chunks(inner).enumerate() {
            let (i, m) = chunk
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| {
                        if v > acc.1 {
                            (i, v)
                        } else {
                            acc
                        }
                    },
                );
            arg.push(ch * inner + i);
            out.push(m);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_vec(out), Op::MaxPool(x, arg), ng))
    }

    /// Max over the middle axis: `[C,T,V] → [C,V]`.
    pub fn max_over_time(&mut self, x: Var) -> Result<Var> {
        let (c, t, v) = self.value(x).dims3()?;
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; c * v];
        let mut arg = vec![0usize; c * v];
        for ch in 0..c {
            for tt in 0..t {
                for j in 0..v {
                    let idx = (ch * t + tt) * v + j;
                    if xd[idx] > out[ch * v + j] {
                        out[ch * v + j] = xd[idx];
                        arg[ch * v + j] = idx;
                    }
                }
            }
        }
        let out = Tensor::new(&[c, v], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaxOverTime(x, arg), ng))
    }

    /// Concatenation of 1-D tensors, or of 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of nothing"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let out = match (first.len(), axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    let v = self.value(p);
                    if v.ndim() != 1 {
                        return Err(Error::shape("concat mixes 1-D and n-D parts"));
                    }
                    data.extend_from_slice(v.data());
                }
                Tensor::from_vec(data)
            }
            (2, 0) => {
                let cols = first[1];
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2()?;
                    if c != cols {
                        return Err(Error::shape(format!("row concat: {c} vs {cols} columns")));
                    }
                    rows += r;
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(&[rows, cols], data)?
            }
            (2, 1) => {
                let rows = first[0];
                let mut widths = Vec::new();
                for &p in parts {
                    let (r, c) = self.value(p).dims2()?;
                    if r != rows {
                        return Err(Error::shape(format!("column concat: {r} vs {rows} rows")));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
                    }
                }
                Tensor::new(&[rows, total], data)?
            }
            _ => {
                return Err(Error::shape(format!(
                    "unsupported concat of {first:?} along axis {axis}"
                )))
            }
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        debug_assert_eq!(out.len(), r * c);
        let ng = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    /// `x / sqrt(Σx² + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = (xv.data().iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        let out = xv.map(|v| v / n);
        let ng = self.needs(x);
        self.push(out, Op::L2Normalize(x, eps), ng)
    }

    /// `[C] → [C, n]`, every column a copy of `x`.
    pub fn repeat_cols(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 1 {
            return Err(Error::shape("repeat_cols needs a vector"));
        }
        let c = xv.len();
        let mut data = Vec::with_capacity(c * n);
        for &v in xv.data() {
            data.extend(std::iter::repeat_n(v, n));
        }
        let out = Tensor::new(&[c, n], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::RepeatCols(x), ng))
    }

    /// `x[start..start+len]` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 1 || start + len > xv.len() {
            return Err(Error::shape(format!(
                "slice {start}..{} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let out = Tensor::from_vec(xv.data()[start..start + len].to_vec());
        let ng = self.needs(x);
        Ok(self.push(out, Op::Slice(x, start), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 1 || target >= lv.len() {
            return Err(Error::shape(format!(
                "cross entropy target {target} for logits {:?}",
                lv.shape()
            )));
        }
        let m = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lv.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[target];
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, target), ng))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.push_back(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    /// Gradients of every trainable parameter leaf, in tape order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.needs_grad => grads.grads[i].clone().map(|g| (id, g)),
                _ => None,
            })
            .collect()
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn push_back(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.scaled(-1.0));
            }
            Op::Maximum(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let first: Vec<bool> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| x >= y)
                    .collect();
                if self.needs(*a) {
                    let data = gout
                        .data()
                        .iter()
                        .zip(&first)
                        .map(|(g, &f)| if f { *g } else { 0.0 })
                        .collect();
                    self.acc(
                        grads,
                        *a,
                        Tensor::new(gout.shape(), data).expect("same shape"),
                    );
                }
                if self.needs(*b) {
                    let data = gout
                        .data()
                        .iter()
                        .zip(&first)
                        .map(|(g, &f)| if f { 0.0 } else { *g })
                        .collect();
                    self.acc(
                        grads,
                        *b,
                        Tensor::new(gout.shape(), data).expect("same shape"),
                    );
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    let g = zip(gout, bv, |g, y| g * y);
                    self.acc(grads, *a, g);
                }
                if self.needs(*b) {
                    let g = zip(gout, av, |g, x| g * x);
                    self.acc(grads, *b, g);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, gout.scaled(*s)),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, gout.clone());
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let inner = gout.len() / c.max(1);
                    let gb: Vec<f64> = gout
                        .data()
                        .chunks(inner.max(1))
                        .map(|ch| ch.iter().sum())
                        .collect();
                    self.acc(grads, *b, Tensor::from_vec(gb));
                }
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let gd = gout.data();
                if self.needs(*a) {
                    let bd = bv.data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] = dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                    self.acc(grads, *a, Tensor::new(&[m, k], ga).expect("shape"));
                }
                if self.needs(*b) {
                    let ad = av.data();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (o, g) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += a_ip * g;
                            }
                        }
                    }
                    self.acc(grads, *b, Tensor::new(&[k, n], gb).expect("shape"));
                }
            }
            Op::MatVec(w, x) => {
                let wv = self.value(*w);
                let xv = self.value(*x);
                let (m, k) = (wv.shape()[0], wv.shape()[1]);
                let gd = gout.data();
                if self.needs(*w) {
                    let mut gw = vec![0.0; m * k];
                    for i in 0..m {
                        for (o, xv) in gw[i * k..(i + 1) * k].iter_mut().zip(xv.data()) {
                            *o = gd[i] * xv;
                        }
                    }
                    self.acc(grads, *w, Tensor::new(&[m, k], gw).expect("shape"));
                }
                if self.needs(*x) {
                    let wd = wv.data();
                    let mut gx = vec![0.0; k];
                    for i in 0..m {
                        for (o, wv) in gx.iter_mut().zip(&wd[i * k..(i + 1) * k]) {
                            *o += gd[i] * wv;
                        }
                    }
                    self.acc(grads, *x, Tensor::from_vec(gx));
                }
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, gout.transpose().expect("2-D"));
            }
            Op::Sigmoid(a) => {
                let g = zip(gout, out, |g, y| g * y * (1.0 - y));
                self.acc(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = zip(gout, out, |g, y| g * (1.0 - y * y));
                self.acc(grads, *a, g);
            }
            Op::LeakyRelu(a, slope) => {
                let g = zip(
                    gout,
                    self.value(*a),
                    |g, x| if x > 0.0 { g } else { slope * g },
                );
                self.acc(grads, *a, g);
            }
            Op::Conv2d { x, w, stride, pad } => {
                self.conv2d_backward(*x, *w, *stride, *pad, gout, grads);
            }
            Op::NodeMix(x, mix) => {
                let v = mix.shape()[0];
                let md = mix.data();
                let mut gx = vec![0.0; gout.len()];
                for (grow, orow) in gx.chunks_mut(v).zip(gout.data().chunks(v)) {
                    for i in 0..v {
                        let go = orow[i];
                        if go == 0.0 {
                            continue;
                        }
                        for (k, gk) in grow.iter_mut().enumerate() {
                            *gk += md[i * v + k] * go;
                        }
                    }
                }
                let g = Tensor::new(gout.shape(), gx).expect("shape");
                self.acc(grads, *x, g);
            }
            Op::MaskMul(x, m) => {
                let xv = self.value(*x);
                let mv = self.value(*m);
                let p = mv.len();
                if self.needs(*x) {
                    let mut gx = gout.clone();
                    for chunk in gx.data_mut().chunks_mut(p) {
                        for (o, w) in chunk.iter_mut().zip(mv.data()) {
                            *o *= w;
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.needs(*m) {
                    let mut gm = vec![0.0; p];
                    for (gch, xch) in gout.data().chunks(p).zip(xv.data().chunks(p)) {
                        for ((o, g), xv) in gm.iter_mut().zip(gch).zip(xch) {
                            *o += g * xv;
                        }
                    }
                    let g = Tensor::new(mv.shape(), gm).expect("shape");
                    self.acc(grads, *m, g);
                }
            }
            Op::MeanPool(x) => {
                let xv = self.value(*x);
                let c = xv.shape()[0];
                let inner = xv.len() / c;
                let mut g = Tensor::zeros(xv.shape());
                for (ch, chunk) in g.data_mut().chunks_mut(inner).enumerate() {
                    let v = gout.data()[ch] / inner as f64;
                    chunk.iter_mut().for_each(|o| *o = v);
                }
                self.acc(grads, *x, g);
            }
            Op::MaxPool(x, arg) | Op::MaxOverTime(x, arg) => {
                let mut g = Tensor::zeros(self.value(*x).shape());
                for (&i, &go) in arg.iter().zip(gout.data()) {
                    g.data_mut()[i] += go;
                }
                self.acc(grads, *x, g);
            }
            Op::Concat(parts, axis) => {
                let first = self.value(parts[0]).ndim();
                if first == 1 || *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        let g = Tensor::new(pv.shape(), gout.data()[off..off + n].to_vec())
                            .expect("shape");
                        off += n;
                        self.acc(grads, p, g);
                    }
                } else {
                    let rows = gout.shape()[0];
                    let total = gout.shape()[1];
                    let mut col = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.shape()[1];
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            g.extend_from_slice(&gout.data()[r * total + col..r * total + col + w]);
                        }
                        col += w;
                        self.acc(grads, p, Tensor::new(pv.shape(), g).expect("shape"));
                    }
                }
            }
            Op::Reshape(x) => {
                let g = gout.clone().reshape(self.value(*x).shape()).expect("shape");
                self.acc(grads, *x, g);
            }
            Op::SoftmaxRows(x) => {
                let c = out.shape()[1];
                let mut g = gout.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::L2Normalize(x, eps) => {
                let xv = self.value(*x);
                let n = (xv.data().iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                let dot: f64 = gout.data().iter().zip(out.data()).map(|(g, y)| g * y).sum();
                let g = zip(gout, out, |g, y| (g - y * dot) / n);
                self.acc(grads, *x, g);
            }
            Op::RepeatCols(x) => {
                let n = out.shape()[1];
                let g: Vec<f64> = gout.data().chunks(n).map(|r| r.iter().sum()).collect();
                self.acc(grads, *x, Tensor::from_vec(g));
            }
            Op::Slice(x, start) => {
                let mut g = Tensor::zeros(self.value(*x).shape());
                g.data_mut()[*start..*start + gout.len()].copy_from_slice(gout.data());
                self.acc(grads, *x, g);
            }
            Op::Sum(x) => {
                let g = Tensor::full(self.value(*x).shape(), gout.data()[0]);
                self.acc(grads, *x, g);
            }
            Op::CrossEntropy(logits, target) => {
                let lv = self.value(*logits);
                let mut p = lv.data().to_vec();
                softmax_in_place(&mut p);
                p[*target] -= 1.0;
                let s = gout.data()[0];
                let g = Tensor::from_vec(p.into_iter().map(|v| v * s).collect());
                self.acc(grads, *logits, g);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (ci, h, wd) = xv.dims3().expect("3-D");
        let ws = wv.shape();
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let (_, ho, wo) = gout.dims3().expect("3-D");
        let gd = gout.data();
        let kd = wv.data();
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let geo = ConvGeom {
            ci,
            h,
            wd,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        };
        let n = ho * wo;
        let kk = ci * kh * kw;
        let mut gx = Vec::new();
        let mut gw = Vec::new();
        if need_w {
            let cols = geo.im2col(xv.data());
            gw = vec![0.0; co * kk];
            for (o, grow) in gd.chunks(n).enumerate() {
                for (r, slot) in gw[o * kk..(o + 1) * kk].iter_mut().enumerate() {
                    *slot = dot(grow, &cols[r * n..(r + 1) * n]);
                }
            }
        }
        if need_x {
            let mut gcols = vec![0.0; kk * n];
            for (o, grow) in gd.chunks(n).enumerate() {
                for (r, &wv) in kd[o * kk..(o + 1) * kk].iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    for (c, &g) in gcols[r * n..(r + 1) * n].iter_mut().zip(grow) {
                        *c += wv * g;
                    }
                }
            }
            gx = geo.col2im(&gcols);
        }
        if need_x {
            self.acc_owned(grads, x, xv.shape(), gx);
        }
        if need_w {
            self.acc_owned(grads, w, wv.shape(), gw);
        }
    }

    fn acc_owned(&self, grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
        self.acc(grads, v, Tensor::new(shape, data).expect("shape"));
    }
}

/// Dot product with four running sums so the loop vectorizes; the order is fixed, so results are reproducible.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Softmax of a slice into a fresh vector.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for len in 1..7 {
            for k in 0..4 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        let Some(out) = conv_out(len, 4, stride, pad) else {
                            continue;
                        };
                        let (lo, hi) = valid_range(len, out, k, stride, pad);
                        let brute: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && (i as usize) < len
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "len={len} k={k} s={stride} p={pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn maximum_routes_gradient_to_the_larger_input() {
        let mut g = Graph::new();
        let a = g.input(t(&[3], &[1.0, 5.0, 2.0]));
        let b = g.input(t(&[3], &[4.0, 0.0, 2.0]));
        let m = g.maximum(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 5.0, 2.0]);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv2d_matches_scalar_loops() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 4, 5], |i| (i as f64 * 0.37).sin()));
        let w = g.constant(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.11).cos()));
        let y = g.conv2d(x, w, (2, 1), (1, 1)).unwrap();
        let xv = g.value(x).clone();
        let wv = g.value(w).clone();
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[3, 2, 5]);
        for o in 0..3 {
            for oy in 0..2 {
                for ox in 0..5 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 4 || ix >= 5 {
                                    continue;
                                }
                                s += wv.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                    * xv.at3(c, iy as usize, ix as usize);
                            }
                        }
                    }
                    assert!((yv.at3(o, oy, ox) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(&[7]));
        let ce = g.cross_entropy(l, 3).unwrap();
        assert!((g.value(ce).data()[0] - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matmul_gradient_is_outer_product() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.input(Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }
}
