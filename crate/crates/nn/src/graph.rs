//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every op eagerly: forward values are computed when a
//! node is appended, so node order is a topological order and backward is a
//! single reverse sweep. Graphs are built per training step and discarded.

use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::kernels::{self, col2im, gemm, im2col, reflect_index};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied op whose forward value is computed by the caller.
///
/// `backward` returns one optional gradient per input, shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param,
    Dense { x: usize, w: usize, b: Option<usize> },
    Conv1d { x: usize, w: usize, b: Option<usize>, pad: usize, dil: usize },
    ConvT1d { x: usize, w: usize, b: Option<usize>, stride: usize },
    MaxPool1d { x: usize, argmax: Vec<usize> },
    MeanLast { x: usize },
    ExpandLast { x: usize },
    Relu { x: usize },
    Tanh { x: usize },
    Exp { x: usize },
    Ln { x: usize },
    NormalCdf { x: usize },
    ClampMin { x: usize, min: f64 },
    Concat { xs: Vec<usize> },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    SliceAxis1 { x: usize, start: usize },
    Smooth { x: usize, kernel: Vec<f64> },
    Mse { a: usize, b: usize },
    Mae { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddBcast { x: usize, y: usize },
    MulBcast { x: usize, y: usize },
    Scale { x: usize, s: f64 },
    AddScalar { x: usize },
    Mean { x: usize },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<(u64, ParamId), usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient accumulated over every use of a parameter in the graph.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.params.get(&(store.key(), id)).and_then(|&n| self.grads[n].as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<(u64, ParamId), usize>,
}

fn shape_err(op: &'static str, node: usize, detail: String) -> NnError {
    NnError::Shape { op, node, detail }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted.
    pub fn input_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter node; each parameter maps to a single node per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.key(), id);
        if let Some(&n) = self.param_nodes.get(&key) {
            return Var(n);
        }
        let v = self.push(store.get(id).clone(), Op::Param, store.is_trainable(id));
        self.param_nodes.insert(key, v.0);
        v
    }

    /// `x (M, in) @ w (in, out) + b (out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("dense", self.next_id(), format!("x {xs:?} w {ws:?}")));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [n] {
                return Err(shape_err("dense", self.next_id(), format!("bias {:?}", bv.shape())));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(m, k, n, 1.0, self.value(x).data(), false, self.value(w).data(), false, 1.0, &mut out);
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(&[m, n], out), Op::Dense { x: x.0, w: w.0, b: b.map(|b| b.0) }, rg))
    }

    /// `x (B, Cin, L)`, `w (Cout, Cin, K)`, zero padding `pad`, dilation `dil`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize, dil: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(shape_err("conv1d", self.next_id(), format!("x {xs:?} w {ws:?}")));
        }
        let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let span = dil * (k - 1);
        if len + 2 * pad < span + 1 {
            return Err(shape_err("conv1d", self.next_id(), format!("input too short: {xs:?}")));
        }
        let out_len = len + 2 * pad - span;
        let mut out = vec![0.0; bsz * cout * out_len];
        let mut cols = vec![0.0; cin * k * out_len];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [cout] {
                    return Err(shape_err("conv1d", self.next_id(), format!("bias {:?}", bv.shape())));
                }
                Some(bv.data().to_vec())
            }
            None => None,
        };
        for bi in 0..bsz {
            im2col(&xv[bi * cin * len..(bi + 1) * cin * len], cin, len, k, pad, dil, out_len, &mut cols);
            let o = &mut out[bi * cout * out_len..(bi + 1) * cout * out_len];
            if let Some(bias) = &bias {
                for (c, row) in o.chunks_mut(out_len).enumerate() {
                    row.fill(bias[c]);
                }
            }
            gemm(cout, cin * k, out_len, 1.0, wv, false, &cols, false, 1.0, o);
        }
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::new(&[bsz, cout, out_len], out),
            Op::Conv1d { x: x.0, w: w.0, b: b.map(|b| b.0), pad, dil },
            rg,
        ))
    }

    /// Transposed convolution: `x (B, Cin, L)`, `w (Cin, Cout, K)`, output length `(L-1)*stride + K`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[0] || stride == 0 {
            return Err(shape_err("conv_transpose1d", self.next_id(), format!("x {xs:?} w {ws:?}")));
        }
        let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[1], ws[2]);
        let out_len = (len - 1) * stride + k;
        let mut out = vec![0.0; bsz * cout * out_len];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(shape_err("conv_transpose1d", self.next_id(), format!("bias {:?}", bv.shape())));
            }
            for bi in 0..bsz {
                for o in 0..cout {
                    out[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len].fill(bv.data()[o]);
                }
            }
        }
        for bi in 0..bsz {
            for c in 0..cin {
                for i in 0..len {
                    let xv_ = xv[(bi * cin + c) * len + i];
                    for o in 0..cout {
                        let base = (bi * cout + o) * out_len + i * stride;
                        let wrow = &wv[(c * cout + o) * k..(c * cout + o + 1) * k];
                        for (kk, wk) in wrow.iter().enumerate() {
                            out[base + kk] += xv_ * wk;
                        }
                    }
                }
            }
        }
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::new(&[bsz, cout, out_len], out),
            Op::ConvT1d { x: x.0, w: w.0, b: b.map(|b| b.0), stride },
            rg,
        ))
    }

    /// Max pooling with window 2 and stride 2 over the last axis of `(B, C, L)`.
    pub fn max_pool1d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[2] < 2 {
            return Err(shape_err("max_pool1d", self.next_id(), format!("x {xs:?}")));
        }
        let (rows, len) = (xs[0] * xs[1], xs[2]);
        let out_len = len / 2;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            for i in 0..out_len {
                let a = r * len + 2 * i;
                let j = if xv[a + 1] > xv[a] { a + 1 } else { a };
                out.push(xv[j]);
                argmax.push(j);
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&[xs[0], xs[1], out_len], out), Op::MaxPool1d { x: x.0, argmax }, rg))
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let len = *xs.last().expect("mean_last on scalar");
        let out: Vec<f64> = self.value(x).data().chunks(len).map(|c| c.iter().sum::<f64>() / len as f64).collect();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::new(&xs[..xs.len() - 1], out), Op::MeanLast { x: x.0 }, rg)
    }

    /// Repeats `x` along a new trailing axis of length `len`.
    pub fn expand_last(&mut self, x: Var, len: usize) -> Var {
        let mut shape = self.shape(x).to_vec();
        let mut out = Vec::with_capacity(self.value(x).len() * len);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat_n(v, len));
        }
        shape.push(len);
        let rg = self.rg(&[x.0]);
        self.push(Tensor::new(&shape, out), Op::ExpandLast { x: x.0 }, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(&[x.0]);
        self.push(v, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp { x: x.0 })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln { x: x.0 })
    }

    pub fn normal_cdf(&mut self, x: Var) -> Var {
        self.unary(x, kernels::normal_cdf, Op::NormalCdf { x: x.0 })
    }

    /// `max(x, min)`; gradient passes only where `x > min`.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        self.unary(x, move |v| v.max(min), Op::ClampMin { x: x.0, min })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, move |v| v * s, Op::Scale { x: x.0, s })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, move |v| v + s, Op::AddScalar { x: x.0 })
    }

    /// Concatenation along axis 1 of tensors sharing every other axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        assert!(!xs.is_empty());
        let s0 = self.shape(xs[0]).to_vec();
        if s0.len() < 2 {
            return Err(shape_err("concat", self.next_id(), format!("rank {}", s0.len())));
        }
        let outer = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[0] != outer || s[2..] != s0[2..] {
                return Err(shape_err("concat", self.next_id(), format!("{s0:?} vs {s:?}")));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(&shape, out), Op::Concat { xs: ids }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.next_id(), format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let v = self.value(x).clone().reshaped(shape);
        let rg = self.rg(&[x.0]);
        Ok(self.push(v, Op::Reshape { x: x.0 }, rg))
    }

    /// Collapses axes `start..=end` into one.
    pub fn flatten(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start > end || end >= s.len() {
            return Err(shape_err("flatten", self.next_id(), format!("{s:?} axes {start}..={end}")));
        }
        let mut shape = s[..start].to_vec();
        shape.push(s[start..=end].iter().product());
        shape.extend_from_slice(&s[end + 1..]);
        self.reshape(x, &shape)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", self.next_id(), format!("{s:?} by {perm:?}")));
        }
        let v = permute_tensor(self.value(x), perm);
        let rg = self.rg(&[x.0]);
        Ok(self.push(v, Op::Permute { x: x.0, perm: perm.to_vec() }, rg))
    }

    /// Slice `[start, end)` along axis 1.
    pub fn slice_axis1(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start >= end || end > s[1] {
            return Err(shape_err("slice_axis1", self.next_id(), format!("{s:?} [{start}, {end})")));
        }
        let inner: usize = s[2..].iter().product();
        let mut out = Vec::with_capacity(s[0] * (end - start) * inner);
        let xv = self.value(x).data();
        for o in 0..s[0] {
            out.extend_from_slice(&xv[(o * s[1] + start) * inner..(o * s[1] + end) * inner]);
        }
        let mut shape = s.clone();
        shape[1] = end - start;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&shape, out), Op::SliceAxis1 { x: x.0, start }, rg))
    }

    /// Fixed depthwise Gaussian smoothing along the last axis of `(B, C, L)`, reflect padding.
    pub fn gaussian_smooth(&mut self, x: Var, sigma: f64, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("gaussian_smooth", self.next_id(), format!("x {s:?}")));
        }
        let kernel = kernels::gaussian_kernel(sigma, size);
        let len = s[2];
        let half = (size / 2) as isize;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (row_in, row_out) in xv.chunks(len).zip(out.chunks_mut(len)) {
            for (t, o) in row_out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, kj) in kernel.iter().enumerate() {
                    acc += kj * row_in[reflect_index(t as isize + j as isize - half, len)];
                }
                *o = acc;
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&s, out), Op::Smooth { x: x.0, kernel }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.next_id(), format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Mean squared error, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = av.len().max(1) as f64;
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(s), Op::Mse { a: a.0, b: b.0 }, rg))
    }

    /// Mean absolute error, reduced to a scalar.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mae", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = av.len().max(1) as f64;
        let s = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(s), Op::Mae { a: a.0, b: b.0 }, rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&shape, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    fn bcast_check(&self, op: &'static str, x: Var, y: Var) -> Result<usize> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(shape_err(op, self.next_id(), format!("{xs:?} with {ys:?}")));
        }
        Ok(self.value(y).len())
    }

    /// `x + y` with `y` matching the trailing axes of `x`.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let inner = self.bcast_check("add_bcast", x, y)?;
        let yv = self.value(y).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(inner) {
            for (a, b) in chunk.iter_mut().zip(&yv) {
                *a += b;
            }
        }
        let rg = self.rg(&[x.0, y.0]);
        Ok(self.push(v, Op::AddBcast { x: x.0, y: y.0 }, rg))
    }

    /// `x * y` with `y` matching the trailing axes of `x`.
    pub fn mul_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let inner = self.bcast_check("mul_bcast", x, y)?;
        let yv = self.value(y).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(inner) {
            for (a, b) in chunk.iter_mut().zip(&yv) {
                *a *= b;
            }
        }
        let rg = self.rg(&[x.0, y.0]);
        Ok(self.push(v, Op::MulBcast { x: x.0, y: y.0 }, rg))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.len().max(1) as f64;
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(m), Op::Mean { x: x.0 }, rg)
    }

    /// Appends a node whose value the caller already computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        self.push(output, Op::Custom { inputs: ids, op }, rg)
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.param_nodes.clone() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gv = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, gv, false, wv.data(), true, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(&[m, k], dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, xv.data(), true, gv, false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(&[k, n], dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; n];
                        for row in gv.chunks(n) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(&[n], db));
                    }
                }
            }
            Op::Conv1d { x, w, b, pad, dil } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (bsz, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let out_len = node.value.shape()[2];
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                let mut dw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
                let mut cols = vec![0.0; cin * k * out_len];
                let mut dcols = vec![0.0; cin * k * out_len];
                for bi in 0..bsz {
                    let go = &gv[bi * cout * out_len..(bi + 1) * cout * out_len];
                    if need_w {
                        im2col(
                            &xv.data()[bi * cin * len..(bi + 1) * cin * len],
                            cin,
                            len,
                            k,
                            *pad,
                            *dil,
                            out_len,
                            &mut cols,
                        );
                        gemm(cout, out_len, cin * k, 1.0, go, false, &cols, true, 1.0, &mut dw);
                    }
                    if need_x {
                        gemm(cin * k, cout, out_len, 1.0, wv.data(), true, go, false, 0.0, &mut dcols);
                        col2im(&dcols, cin, len, k, *pad, *dil, out_len, &mut dx[bi * cin * len..(bi + 1) * cin * len]);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; cout];
                        for (r, row) in gv.chunks(out_len).enumerate() {
                            db[r % cout] += row.iter().sum::<f64>();
                        }
                        self.accumulate(grads, *b, Tensor::new(&[cout], db));
                    }
                }
            }
            Op::ConvT1d { x, w, b, stride } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (bsz, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[1], wv.shape()[2]);
                let out_len = node.value.shape()[2];
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for bi in 0..bsz {
                    for c in 0..cin {
                        for i_ in 0..len {
                            let xi = (bi * cin + c) * len + i_;
                            let mut acc = 0.0;
                            for o in 0..cout {
                                let base = (bi * cout + o) * out_len + i_ * stride;
                                for kk in 0..k {
                                    let go = gv[base + kk];
                                    acc += go * wv.data()[(c * cout + o) * k + kk];
                                    dw[(c * cout + o) * k + kk] += xv.data()[xi] * go;
                                }
                            }
                            dx[xi] = acc;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
                self.accumulate(grads, *w, Tensor::new(wv.shape(), dw));
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; cout];
                        for (r, row) in gv.chunks(out_len).enumerate() {
                            db[r % cout] += row.iter().sum::<f64>();
                        }
                        self.accumulate(grads, *b, Tensor::new(&[cout], db));
                    }
                }
            }
            Op::MaxPool1d { x, argmax } => {
                let xv = &self.nodes[*x].value;
                let mut dx = vec![0.0; xv.len()];
                for (j, &src) in argmax.iter().enumerate() {
                    dx[src] += gv[j];
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
            }
            Op::MeanLast { x } => {
                let xv = &self.nodes[*x].value;
                let len = *xv.shape().last().unwrap();
                let mut dx = Vec::with_capacity(xv.len());
                for &gi in gv {
                    dx.extend(std::iter::repeat_n(gi / len as f64, len));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
            }
            Op::ExpandLast { x } => {
                let xv = &self.nodes[*x].value;
                let len = *node.value.shape().last().unwrap();
                let dx: Vec<f64> = gv.chunks(len).map(|c| c.iter().sum()).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
            }
            Op::Relu { x } => {
                let xv = &self.nodes[*x].value;
                let dx = zip_map(xv.data(), gv, |v, g| if v > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let dx = zip_map(y, gv, |t, g| g * (1.0 - t * t));
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx));
            }
            Op::Exp { x } => {
                let dx = zip_map(node.value.data(), gv, |e, g| g * e);
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx));
            }
            Op::Ln { x } => {
                let xv = &self.nodes[*x].value;
                let dx = zip_map(xv.data(), gv, |v, g| g / v);
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
            }
            Op::NormalCdf { x } => {
                let xv = &self.nodes[*x].value;
                let dx = zip_map(xv.data(), gv, |v, g| g * kernels::normal_pdf(v));
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
            }
            Op::ClampMin { x, min } => {
                let xv = &self.nodes[*x].value;
                let dx = zip_map(xv.data(), gv, |v, g| if v > *min { g } else { 0.0 });
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
            }
            Op::Concat { xs } => {
                let outer = node.value.shape()[0];
                let total = node.value.shape()[1];
                let inner: usize = node.value.shape()[2..].iter().product();
                let mut offset = 0;
                for &src in xs {
                    let c = self.nodes[src].value.shape()[1];
                    if self.needs(src) {
                        let mut d = Vec::with_capacity(outer * c * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&gv[start..start + c * inner]);
                        }
                        self.accumulate(grads, src, Tensor::new(self.nodes[src].value.shape(), d));
                    }
                    offset += c;
                }
            }
            Op::Reshape { x } => {
                let s = self.nodes[*x].value.shape();
                self.accumulate(grads, *x, g.clone().reshaped(s));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, permute_tensor(g, &inv));
            }
            Op::SliceAxis1 { x, start } => {
                let s = self.nodes[*x].value.shape();
                let inner: usize = s[2..].iter().product();
                let width = node.value.shape()[1];
                let mut dx = vec![0.0; self.nodes[*x].value.len()];
                for o in 0..s[0] {
                    let dst = (o * s[1] + start) * inner;
                    let src = o * width * inner;
                    dx[dst..dst + width * inner].copy_from_slice(&gv[src..src + width * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(s, dx));
            }
            Op::Smooth { x, kernel } => {
                let s = self.nodes[*x].value.shape();
                let len = s[2];
                let half = (kernel.len() / 2) as isize;
                let mut dx = vec![0.0; self.nodes[*x].value.len()];
                for (row_g, row_d) in gv.chunks(len).zip(dx.chunks_mut(len)) {
                    for (t, gt) in row_g.iter().enumerate() {
                        for (j, kj) in kernel.iter().enumerate() {
                            row_d[reflect_index(t as isize + j as isize - half, len)] += kj * gt;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, dx));
            }
            Op::Mse { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let scale = 2.0 * gv[0] / av.len().max(1) as f64;
                let d = zip_map(av.data(), bv.data(), |x, y| scale * (x - y));
                if self.needs(*b) {
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), neg));
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), d));
            }
            Op::Mae { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let scale = gv[0] / av.len().max(1) as f64;
                let d = zip_map(av.data(), bv.data(), |x, y| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        0.0
                    }
                });
                if self.needs(*b) {
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), neg));
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), d));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.needs(*a) {
                    self.accumulate(grads, *a, Tensor::new(av.shape(), zip_map(gv, bv.data(), |g, y| g * y)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), zip_map(gv, av.data(), |g, x| g * x)));
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.needs(*a) {
                    self.accumulate(grads, *a, Tensor::new(av.shape(), zip_map(gv, bv.data(), |g, y| g / y)));
                }
                if self.needs(*b) {
                    let d: Vec<f64> =
                        gv.iter().zip(av.data()).zip(bv.data()).map(|((g, x), y)| -g * x / (y * y)).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), d));
                }
            }
            Op::AddBcast { x, y } => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*y) {
                    let yv = &self.nodes[*y].value;
                    let mut dy = vec![0.0; yv.len()];
                    for chunk in gv.chunks(yv.len()) {
                        for (d, c) in dy.iter_mut().zip(chunk) {
                            *d += c;
                        }
                    }
                    self.accumulate(grads, *y, Tensor::new(yv.shape(), dy));
                }
            }
            Op::MulBcast { x, y } => {
                let (xv, yv) = (&self.nodes[*x].value, &self.nodes[*y].value);
                let inner = yv.len();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for chunk in dx.data_mut().chunks_mut(inner) {
                        for (d, w) in chunk.iter_mut().zip(yv.data()) {
                            *d *= w;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*y) {
                    let mut dy = vec![0.0; inner];
                    for (gc, xc) in gv.chunks(inner).zip(xv.data().chunks(inner)) {
                        for ((d, a), b) in dy.iter_mut().zip(gc).zip(xc) {
                            *d += a * b;
                        }
                    }
                    self.accumulate(grads, *y, Tensor::new(yv.shape(), dy));
                }
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::AddScalar { x } => {
                self.accumulate(grads, *x, g.clone());
            }
            Op::Mean { x } => {
                let xv = &self.nodes[*x].value;
                let d = gv[0] / xv.len().max(1) as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), d));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let outs = op.backward(&ins, &node.value, g);
                assert_eq!(outs.len(), inputs.len(), "custom op {} returned wrong arity", op.name());
                for (&j, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        assert_eq!(d.shape(), self.nodes[j].value.shape(), "custom op {} grad shape", op.name());
                        self.accumulate(grads, j, d);
                    }
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// Generic axis permutation; output axis `i` is input axis `perm[i]`.
pub fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let rank = s.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let xv = x.data();
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, st)| i * st).sum();
        out.push(xv[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}
