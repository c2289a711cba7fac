//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! A [`Graph`] records every operation executed through it. Calling
//! [`Graph::backward`] consumes the graph and replays the adjoints in reverse.

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::{NumError, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marks an empty slot in [`Graph::stack_rows`].
pub const EMPTY_SLOT: u32 = u32::MAX;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Conv2d { input: Var, kernels: Var, batch: usize, c_in: usize, c_out: usize, h: usize, w: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    GatherLast { a: Var, idx: Vec<usize> },
    Reshape(Var),
    SliceRows { a: Var, start: usize },
    SelectRows { a: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    StackRows { parts: Vec<Var>, pick: Vec<u32> },
    Attention { q: Var, k: Var, v: Var, mask: Vec<bool>, heads: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Values are computed eagerly as operations are recorded.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    param_shapes: Vec<Vec<usize>>,
}

fn shape_err(op: &'static str, detail: String) -> NumError {
    NumError::Shape { op, detail }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter, creating its leaf on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
            self.param_shapes = store.iter().map(|(_, t)| t.shape().to_vec()).collect();
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() || av.last_dim() != bv.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (k, c) = (bv.shape()[0], bv.shape()[1]);
        let r = av.len() / k;
        let mut out = vec![0.0; r * c];
        kernels::matmul_acc(av.data(), bv.data(), &mut out, r, k, c);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, NumError> {
        self.same_shape(name, a, b)?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, t, op, rg)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, NumError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(name, t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_with("minimum", a, b, Op::Minimum(a, b), f64::min)
    }

    /// `x[..., d] + bias[d]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.last_dim();
        if bv.len() != d {
            return Err(shape_err("add_row", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let b = bv.data();
        let data = xv.data().chunks(d).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_row", t, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        self.map("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        self.map("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumError> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        self.map("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        self.map("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.map("sigmoid", a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, NumError> {
        self.map("clamp", a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a);
        let s = v.sum() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums over the last axis: `[..., d] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a);
        let d = v.last_dim();
        let data: Vec<f64> = v.data().chunks(d).map(|r| r.iter().sum()).collect();
        let mut shape = v.shape().to_vec();
        shape.pop();
        let rg = self.rg(a);
        self.push("sum_last", Tensor::new(shape, data)?, Op::SumLast(a), rg)
    }

    /// Same-padding 3×3 cross-correlation. `input` is `[C_in, H, W]` or
    /// `[B, C_in, H, W]`; `kernels` is `[C_out, C_in, 3, 3]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var) -> Result<Var, NumError> {
        let (iv, kv) = (self.value(input), self.value(kernels));
        let ks = kv.shape();
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(shape_err("conv2d", format!("kernel shape {:?} is not [C_out, C_in, 3, 3]", ks)));
        }
        let (batch, c_in, h, w, batched) = match iv.shape() {
            [c, h, w] => (1, *c, *h, *w, false),
            [b, c, h, w] => (*b, *c, *h, *w, true),
            s => return Err(shape_err("conv2d", format!("input shape {:?}", s))),
        };
        if ks[1] != c_in {
            return Err(shape_err("conv2d", format!("input has {} channels, kernels expect {}", c_in, ks[1])));
        }
        let c_out = ks[0];
        let mut out = vec![0.0; batch * c_out * h * w];
        let (isz, osz) = (c_in * h * w, c_out * h * w);
        for b in 0..batch {
            kernels::conv3x3(
                &iv.data()[b * isz..(b + 1) * isz],
                kv.data(),
                &mut out[b * osz..(b + 1) * osz],
                c_in,
                c_out,
                h,
                w,
            );
        }
        let shape = if batched { vec![batch, c_out, h, w] } else { vec![c_out, h, w] };
        let rg = self.rg(input) || self.rg(kernels);
        self.push("conv2d", Tensor::new(shape, out)?, Op::Conv2d { input, kernels, batch, c_in, c_out, h, w }, rg)
    }

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumError> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d < 2 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", format!("x {:?}, gain/bias must be [{}] and d >= 2", xv.shape(), d)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push("layer_norm", Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = vec![0.0; v.len()];
        for (i, o) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::softmax_row(i, o);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push("softmax", t, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = vec![0.0; v.len()];
        for (i, o) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::log_softmax_row(i, o);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push("log_softmax", t, Op::LogSoftmax(a), rg)
    }

    /// Picks one entry per row of a `[N, d]` value: `out[i] = a[i, idx[i]]`.
    pub fn gather_last(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumError> {
        let v = self.value(a);
        let d = v.last_dim();
        if v.rows() != idx.len() || idx.iter().any(|&i| i >= d) {
            return Err(shape_err("gather_last", format!("{:?} with {} indices", v.shape(), idx.len())));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| v.data()[r * d + i]).collect();
        let rg = self.rg(a);
        self.push("gather_last", Tensor::new(vec![idx.len()], data)?, Op::GatherLast { a, idx: idx.to_vec() }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumError> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", t, Op::Reshape(a), rg)
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let v = self.value(a);
        let n = *v.shape().first().unwrap_or(&0);
        if start > end || end > n {
            return Err(shape_err("slice_rows", format!("{}..{} of {}", start, end, n)));
        }
        let stride = v.len() / n.max(1);
        let data = v.data()[start * stride..end * stride].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let rg = self.rg(a);
        self.push("slice_rows", Tensor::new(shape, data)?, Op::SliceRows { a, start }, rg)
    }

    /// Gathers rows along the first axis.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumError> {
        let v = self.value(a);
        let n = *v.shape().first().unwrap_or(&0);
        if idx.iter().any(|&i| i >= n) {
            return Err(shape_err("select_rows", format!("index out of {} rows", n)));
        }
        let stride = v.len() / n.max(1);
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&v.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(a);
        self.push("select_rows", Tensor::new(shape, data)?, Op::SelectRows { a, idx: idx.to_vec() }, rg)
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no parts".into()))?;
        let tail: Vec<usize> = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{:?} vs tail {:?}", v.shape(), tail)));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Assembles `[B, slots, d]` from `[B, d]` parts:
    /// `out[b, j] = parts[pick[b * slots + j]][b]`, or zeros for [`EMPTY_SLOT`].
    pub fn stack_rows(&mut self, parts: &[Var], pick: Vec<u32>, slots: usize) -> Result<Var, NumError> {
        let first = parts.first().ok_or_else(|| shape_err("stack_rows", "no parts".into()))?;
        let fs = self.value(*first).shape().to_vec();
        if fs.len() != 2 {
            return Err(shape_err("stack_rows", format!("parts must be [B, d], got {:?}", fs)));
        }
        let (b, d) = (fs[0], fs[1]);
        if parts.iter().any(|&p| self.value(p).shape() != [b, d]) || pick.len() != b * slots {
            return Err(shape_err("stack_rows", "part shapes or pick length disagree".into()));
        }
        let mut out = vec![0.0; b * slots * d];
        for row in 0..b {
            for j in 0..slots {
                let p = pick[row * slots + j];
                if p == EMPTY_SLOT {
                    continue;
                }
                let src = self.value(parts[p as usize]).row(row);
                out[(row * slots + j) * d..(row * slots + j + 1) * d].copy_from_slice(src);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("stack_rows", Tensor::new(vec![b, slots, d], out)?, Op::StackRows { parts: parts.to_vec(), pick }, rg)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[B, T, D]`, `k` and `v` are `[B, S, D]`, `key_mask` has `B * S`
    /// entries (false keys are skipped). Queries with no visible key produce
    /// zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], heads: usize) -> Result<Var, NumError> {
        let (qs, ks) = (self.value(q).shape().to_vec(), self.value(k).shape().to_vec());
        if qs.len() != 3 || ks.len() != 3 || self.value(v).shape() != &ks[..] || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(shape_err("attention", format!("q {:?}, k {:?}, v {:?}", qs, ks, self.value(v).shape())));
        }
        let (b, t, dm) = (qs[0], qs[1], qs[2]);
        let s = ks[1];
        if heads == 0 || dm % heads != 0 || key_mask.len() != b * s {
            return Err(shape_err("attention", format!("{} heads for width {}, mask {}", heads, dm, key_mask.len())));
        }
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; b * heads * t * s];
        let mut out = vec![0.0; b * t * dm];
        let mut scores = vec![0.0; s];
        for bi in 0..b {
            let mask = &key_mask[bi * s..(bi + 1) * s];
            for h in 0..heads {
                for ti in 0..t {
                    let qrow = &qd[(bi * t + ti) * dm + h * dh..(bi * t + ti) * dm + (h + 1) * dh];
                    let mut m = f64::NEG_INFINITY;
                    for si in 0..s {
                        if !mask[si] {
                            continue;
                        }
                        let krow = &kd[(bi * s + si) * dm + h * dh..(bi * s + si) * dm + (h + 1) * dh];
                        let sc = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                        scores[si] = sc;
                        m = m.max(sc);
                    }
                    if m == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((bi * heads + h) * t + ti) * s..((bi * heads + h) * t + ti + 1) * s];
                    let mut z = 0.0;
                    for si in 0..s {
                        if mask[si] {
                            p[si] = (scores[si] - m).exp();
                            z += p[si];
                        }
                    }
                    let orow = &mut out[(bi * t + ti) * dm + h * dh..(bi * t + ti) * dm + (h + 1) * dh];
                    for si in 0..s {
                        if !mask[si] {
                            continue;
                        }
                        p[si] /= z;
                        let vrow = &vd[(bi * s + si) * dm + h * dh..(bi * s + si) * dm + (h + 1) * dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p[si] * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let op = Op::Attention { q, k, v, mask: key_mask.to_vec(), heads, probs };
        self.push("attention", Tensor::new(vec![b, t, dm], out)?, op, rg)
    }

    /// Replays adjoints from a scalar `loss`. The tape is consumed.
    pub fn backward(self, loss: Var) -> Result<Gradients, NumError> {
        if self.value(loss).len() != 1 {
            return Err(NumError::NonScalarLoss { shape: self.value(loss).shape().to_vec() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let leaf_grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => Some(g),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            param_vars: self.param_vars,
            param_shapes: self.param_shapes,
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, c) = (bv.shape()[0], bv.shape()[1]);
                let r = av.len() / k;
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_nt_acc(g, bv.data(), ga, r, c, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(av.data(), g, gb, r, k, c);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gy * bv;
                    }
                }
                let ad = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gy * av;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if ad[j] <= bd[j] {
                            ga[j] += g[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        if ad[j] > bd[j] {
                            gb[j] += g[j];
                        }
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), o) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * o;
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), o) in ga.iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), o) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * (1.0 - o * o);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), o) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * o * (1.0 - o);
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let ad = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if ad[j] >= *lo && ad[j] <= *hi {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len().max(1) as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::SumLast(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let d = ga.len() / g.len().max(1);
                    for (row, gy) in ga.chunks_mut(d).zip(g) {
                        row.iter_mut().for_each(|x| *x += gy);
                    }
                }
            }
            Op::Conv2d { input, kernels: kv, batch, c_in, c_out, h, w } => {
                let (id, kd) = (self.value(*input).data(), self.value(*kv).data());
                let (isz, osz) = (c_in * h * w, c_out * h * w);
                let mut gi = self.acc(grads, *input).map(std::mem::take);
                let mut gk = self.acc(grads, *kv).map(std::mem::take);
                for b in 0..*batch {
                    kernels::conv3x3_backward(
                        &id[b * isz..(b + 1) * isz],
                        kd,
                        &g[b * osz..(b + 1) * osz],
                        gi.as_mut().map(|x| &mut x[b * isz..(b + 1) * isz]),
                        gk.as_deref_mut(),
                        *c_in,
                        *c_out,
                        *h,
                        *w,
                    );
                }
                if let Some(x) = gi {
                    grads[input.0] = Some(x);
                }
                if let Some(x) = gk {
                    grads[kv.0] = Some(x);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gd = self.value(*gain).data();
                let d = gd.len();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (row_g, row_x) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_x[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row_g in g.chunks(d) {
                        gb.iter_mut().zip(row_g).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, ((row_g, row_x), row_out)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        // dxhat = g * gain
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = row_g[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * row_x[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = row_g[j] * gd[j];
                            row_out[j] += inv_std[r] * (dxh - m1 - row_x[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let d = node.value.last_dim();
                    for ((gr, orow), dst) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(orow).map(|(x, y)| x * y).sum();
                        for j in 0..d {
                            dst[j] += orow[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let d = node.value.last_dim();
                    for ((gr, orow), dst) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..d {
                            dst[j] += gr[j] - orow[j].exp() * s;
                        }
                    }
                }
            }
            Op::GatherLast { a, idx } => {
                let d = self.value(*a).last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * d + j] += g[r];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::SliceRows { a, start } => {
                let v = self.value(*a);
                let stride = v.len() / v.shape()[0].max(1);
                if let Some(ga) = self.acc(grads, *a) {
                    ga[start * stride..start * stride + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::SelectRows { a, idx } => {
                let v = self.value(*a);
                let stride = v.len() / v.shape()[0].max(1);
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..stride {
                            ga[i * stride + j] += g[r * stride + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::StackRows { parts, pick } => {
                let s = node.value.shape();
                let (b, slots, d) = (s[0], s[1], s[2]);
                for (pi, &p) in parts.iter().enumerate() {
                    let Some(gp) = self.acc(grads, p) else { continue };
                    for row in 0..b {
                        for j in 0..slots {
                            if pick[row * slots + j] == pi as u32 {
                                let src = &g[(row * slots + j) * d..(row * slots + j + 1) * d];
                                gp[row * d..(row + 1) * d].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, mask, heads, probs } => {
                self.attention_backward(*q, *k, *v, mask, *heads, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let qs = self.value(q).shape();
        let (b, t, dm) = (qs[0], qs[1], qs[2]);
        let s = self.value(k).shape()[1];
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; s];
        for bi in 0..b {
            let m = &mask[bi * s..(bi + 1) * s];
            for h in 0..heads {
                for ti in 0..t {
                    let p = &probs[((bi * heads + h) * t + ti) * s..((bi * heads + h) * t + ti + 1) * s];
                    let go = &g[(bi * t + ti) * dm + h * dh..(bi * t + ti) * dm + (h + 1) * dh];
                    let mut dot = 0.0;
                    for si in 0..s {
                        if !m[si] {
                            continue;
                        }
                        let vo = (bi * s + si) * dm + h * dh;
                        let vrow = &vd[vo..vo + dh];
                        dp[si] = go.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        dot += p[si] * dp[si];
                        for (x, y) in gv[vo..vo + dh].iter_mut().zip(go) {
                            *x += p[si] * y;
                        }
                    }
                    let qo = (bi * t + ti) * dm + h * dh;
                    for si in 0..s {
                        if !m[si] {
                            continue;
                        }
                        let ds = p[si] * (dp[si] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = (bi * s + si) * dm + h * dh;
                        for j in 0..dh {
                            gq[qo + j] += ds * kd[ko + j];
                            gk[ko + j] += ds * qd[qo + j];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(dst) = self.acc(grads, var) {
                dst.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    leaf_grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    param_vars: Vec<Option<Var>>,
    param_shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; unreachable leaves get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.leaf_grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients for every parameter of the bound store, in store order.
    /// Parameters that were never bound get zeros.
    pub fn params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .enumerate()
            .map(|(i, (_, t))| match self.param_vars.get(i).copied().flatten() {
                Some(v) => self.get(v),
                None => Tensor::zeros(self.param_shapes.get(i).map_or(t.shape(), |s| s.as_slice())),
            })
            .collect()
    }
}
