//! Computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse scan.

use std::collections::HashMap;

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-12;

/// Floor on the norm product in cosine similarity.
const COS_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    MatMulBT,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale,
    ConcatRows,
    ConcatCols,
    GatherRows,
    Softmax,
    LayerNorm,
    Gelu,
    Cosine,
    Log,
    Exp,
    Mean,
    Sum,
    CrossEntropy,
    StopGrad,
    Transpose,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulBT => "matmul_bt",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Cosine => "cosine",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::StopGrad => "stop_grad",
            OpKind::Transpose => "transpose",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    Cosine(usize, usize),
    Log(usize),
    Exp(usize),
    Mean(usize),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    StopGrad,
    Transpose(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. `None` when `v` does not
    /// require a gradient; zeros when it does but no path reaches the loss.
    pub fn get(&self, v: Var) -> Option<Vec<f64>> {
        if !self.requires[v.0] {
            return None;
        }
        Some(self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.sizes[v.0]]))
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    param_cache: HashMap<ParamId, Var>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides describe row-major or transposed views that stay
    // within the bounds asserted above; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape_err(&self, op: OpKind, vars: &[Var]) -> Error {
        Error::Shape {
            op: op.name(),
            shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding a copy of a stored parameter; requires a gradient iff the
    /// parameter is trainable. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.get(id).trainable;
        self.param_with(store, id, trainable)
    }

    /// Like [`Graph::param`] but forces gradient tracking, for probes on
    /// frozen parameters.
    pub fn param_tracked(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.param_with(store, id, true)
    }

    fn param_with(&mut self, store: &ParamStore, id: ParamId, requires_grad: bool) -> Var {
        // tracking is fixed when the leaf is first inserted
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), requires_grad);
        self.params.push((v, id));
        self.param_cache.insert(id, v);
        v
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err(OpKind::MatMul, &[a, b]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(self.shape_err(OpKind::MatMulBT, &[a, b]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBT(a.0, b.0), rg))
    }

    fn zip_same(&mut self, kind: OpKind, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(kind, &[a, b]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((Tensor::new(self.shape(a).to_vec(), data)?, self.rg(&[a.0, b.0])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip_same(OpKind::Add, a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip_same(OpKind::Sub, a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip_same(OpKind::Mul, a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    /// Adds a row vector (numel == cols) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(self.shape_err(OpKind::AddRow, &[x, bias]));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(t, Op::AddRow(x.0, bias.0), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::Scale(x.0, factor), rg))
    }

    /// Stacks 2-D inputs with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape {
                op: OpKind::ConcatRows.name(),
                shapes: vec![],
            });
        }
        let cols = self.value(xs[0]).cols();
        if xs.iter().any(|&v| self.shape(v).len() != 2 || self.value(v).cols() != cols) {
            return Err(self.shape_err(OpKind::ConcatRows, xs));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            data.extend_from_slice(self.value(v).data());
            rows += self.value(v).rows();
        }
        let idx: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(idx), rg))
    }

    /// Joins 2-D inputs with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape {
                op: OpKind::ConcatCols.name(),
                shapes: vec![],
            });
        }
        let rows = self.value(xs[0]).rows();
        if xs.iter().any(|&v| self.shape(v).len() != 2 || self.value(v).rows() != rows) {
            return Err(self.shape_err(OpKind::ConcatCols, xs));
        }
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let idx: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(idx), rg))
    }

    /// Selects rows of `x` (repeats allowed) into a `[indices.len(), cols]` matrix.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
            return Err(Error::Shape {
                op: OpKind::GatherRows.name(),
                shapes: vec![self.shape(x).to_vec(), indices.to_vec()],
            });
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), cols], data)?,
            Op::GatherRows(x.0, indices.to_vec()),
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::Softmax(x.0), rg))
    }

    /// Layer normalization over the last axis with elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(self.shape_err(OpKind::LayerNorm, &[x, gain, bias]));
        }
        let rows = self.value(x).rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.value(x).data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Tanh-approximated Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::Gelu(x.0), rg))
    }

    /// Row-wise cosine similarity of two same-shape inputs; output `[rows]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(OpKind::Cosine, &[a, b]));
        }
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out = (0..rows)
            .map(|r| {
                let (x, y) = (&da[r * cols..(r + 1) * cols], &db[r * cols..(r + 1) * cols]);
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
                dot / (nx * ny).max(COS_EPS)
            })
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![rows], out)?, Op::Cosine(a.0, b.0), rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::Log(x.0), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.exp()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::Exp(x.0), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x.0), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x.0), rg))
    }

    /// Per-row `-log softmax(logits)[target]`; output `[rows]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != rows || targets.iter().any(|&t| t >= cols) {
            return Err(Error::Shape {
                op: OpKind::CrossEntropy.name(),
                shapes: vec![self.shape(logits).to_vec(), targets.to_vec()],
            });
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut out = Vec::with_capacity(rows);
        for (r, row) in self.value(logits).data().chunks(cols).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.push(lse - row[targets[r]]);
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::new(vec![rows], out)?,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Forward identity that blocks every gradient through this edge.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGrad, false)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(self.shape_err(OpKind::Transpose, &[x]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x.0), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let requires: Vec<bool> = self.nodes.iter().map(|nd| nd.requires_grad).collect();
        let sizes: Vec<usize> = self.nodes.iter().map(|nd| nd.value.numel()).collect();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !requires[loss.0] {
            return Ok(Gradients { grads, requires, sizes });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !requires[i] {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads, &requires);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads, requires, sizes })
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>], req: &[bool]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if req[*a] {
                    // dA = dC B^T
                    let ga = grad_buf(grads, *a, m * k);
                    gemm(m, n, k, gy, (n as isize, 1), val(*b).data(), (1, n as isize), ga, 1.0);
                }
                if req[*b] {
                    // dB = A^T dC
                    let gb = grad_buf(grads, *b, k * n);
                    gemm(k, m, n, val(*a).data(), (1, k as isize), gy, (n as isize, 1), gb, 1.0);
                }
            }
            Op::MatMulBT(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if req[*a] {
                    // dA = dC B
                    let ga = grad_buf(grads, *a, m * k);
                    gemm(m, n, k, gy, (n as isize, 1), val(*b).data(), (k as isize, 1), ga, 1.0);
                }
                if req[*b] {
                    // dB = dC^T A
                    let gb = grad_buf(grads, *b, n * k);
                    gemm(n, m, k, gy, (1, n as isize), val(*a).data(), (k as isize, 1), gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if req[p] {
                        let g = grad_buf(grads, p, gy.len());
                        g.iter_mut().zip(gy).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if req[*a] {
                    let g = grad_buf(grads, *a, gy.len());
                    g.iter_mut().zip(gy).for_each(|(x, y)| *x += y);
                }
                if req[*b] {
                    let g = grad_buf(grads, *b, gy.len());
                    g.iter_mut().zip(gy).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if req[*a] {
                    let other = val(*b).data();
                    let g = grad_buf(grads, *a, gy.len());
                    for ((x, y), o) in g.iter_mut().zip(gy).zip(other) {
                        *x += y * o;
                    }
                }
                if req[*b] {
                    let other = val(*a).data();
                    let g = grad_buf(grads, *b, gy.len());
                    for ((x, y), o) in g.iter_mut().zip(gy).zip(other) {
                        *x += y * o;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if req[*x] {
                    let g = grad_buf(grads, *x, gy.len());
                    g.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                }
                if req[*bias] {
                    let cols = val(*bias).numel();
                    let g = grad_buf(grads, *bias, cols);
                    for row in gy.chunks(cols) {
                        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Scale(x, f) => {
                if req[*x] {
                    let g = grad_buf(grads, *x, gy.len());
                    g.iter_mut().zip(gy).for_each(|(a, b)| *a += b * f);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if req[p] {
                        let g = grad_buf(grads, p, len);
                        g.iter_mut()
                            .zip(&gy[offset..offset + len])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut col0 = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if req[p] {
                        let g = grad_buf(grads, p, rows * c);
                        for r in 0..rows {
                            let src = &gy[r * total + col0..r * total + col0 + c];
                            g[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    col0 += c;
                }
            }
            Op::GatherRows(x, idx) => {
                if req[*x] {
                    let cols = val(*x).cols();
                    let g = grad_buf(grads, *x, val(*x).numel());
                    for (r, &src) in idx.iter().enumerate() {
                        g[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(&gy[r * cols..(r + 1) * cols])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Softmax(x) => {
                if req[*x] {
                    let cols = node.value.cols();
                    let y = node.value.data();
                    let g = grad_buf(grads, *x, y.len());
                    for ((gr, yr), gyr) in g.chunks_mut(cols).zip(y.chunks(cols)).zip(gy.chunks(cols)) {
                        let dot: f64 = yr.iter().zip(gyr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gr[j] += yr[j] * (gyr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let gvals = val(*gain).data();
                if req[*x] {
                    let g = grad_buf(grads, *x, gy.len());
                    for (r, (gr, gyr)) in g.chunks_mut(cols).zip(gy.chunks(cols)).enumerate() {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let dxh: Vec<f64> = gyr.iter().zip(gvals).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            gr[j] += inv_std[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if req[*gain] {
                    let g = grad_buf(grads, *gain, cols);
                    for (gyr, xh) in gy.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            g[j] += gyr[j] * xh[j];
                        }
                    }
                }
                if req[*bias] {
                    let g = grad_buf(grads, *bias, cols);
                    for gyr in gy.chunks(cols) {
                        g.iter_mut().zip(gyr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Gelu(x) => {
                if req[*x] {
                    let xv = val(*x).data();
                    let g = grad_buf(grads, *x, gy.len());
                    for ((a, b), v) in g.iter_mut().zip(gy).zip(xv) {
                        *a += b * gelu_grad(*v);
                    }
                }
            }
            Op::Cosine(a, b) => {
                let cols = val(*a).cols();
                let (da, db) = (val(*a).data(), val(*b).data());
                let rows = gy.len();
                let mut ga_loc = vec![0.0; da.len()];
                let mut gb_loc = vec![0.0; db.len()];
                for r in 0..rows {
                    let (x, y) = (&da[r * cols..(r + 1) * cols], &db[r * cols..(r + 1) * cols]);
                    let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                    let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
                    let denom = nx * ny;
                    if denom < COS_EPS {
                        // flat region of the clamped definition
                        for j in 0..cols {
                            ga_loc[r * cols + j] = gy[r] * y[j] / COS_EPS;
                            gb_loc[r * cols + j] = gy[r] * x[j] / COS_EPS;
                        }
                        continue;
                    }
                    let c = node.value.data()[r];
                    for j in 0..cols {
                        ga_loc[r * cols + j] = gy[r] * (y[j] / denom - c * x[j] / (nx * nx));
                        gb_loc[r * cols + j] = gy[r] * (x[j] / denom - c * y[j] / (ny * ny));
                    }
                }
                if req[*a] {
                    let g = grad_buf(grads, *a, da.len());
                    g.iter_mut().zip(&ga_loc).for_each(|(p, q)| *p += q);
                }
                if req[*b] {
                    let g = grad_buf(grads, *b, db.len());
                    g.iter_mut().zip(&gb_loc).for_each(|(p, q)| *p += q);
                }
            }
            Op::Log(x) => {
                if req[*x] {
                    let xv = val(*x).data();
                    let g = grad_buf(grads, *x, gy.len());
                    for ((a, b), v) in g.iter_mut().zip(gy).zip(xv) {
                        *a += b / v;
                    }
                }
            }
            Op::Exp(x) => {
                if req[*x] {
                    let y = node.value.data();
                    let g = grad_buf(grads, *x, gy.len());
                    for ((a, b), v) in g.iter_mut().zip(gy).zip(y) {
                        *a += b * v;
                    }
                }
            }
            Op::Sum(x) => {
                if req[*x] {
                    let n = val(*x).numel();
                    let g = grad_buf(grads, *x, n);
                    g.iter_mut().for_each(|a| *a += gy[0]);
                }
            }
            Op::Mean(x) => {
                if req[*x] {
                    let n = val(*x).numel();
                    let g = grad_buf(grads, *x, n);
                    let d = gy[0] / n as f64;
                    g.iter_mut().for_each(|a| *a += d);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if req[*logits] {
                    let cols = val(*logits).cols();
                    let g = grad_buf(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..cols {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            g[r * cols + j] += gy[r] * (probs[r * cols + j] - ind);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if req[*x] {
                    let s = val(*x).shape();
                    let (r, c) = (s[0], s[1]);
                    let g = grad_buf(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j * r + i];
                        }
                    }
                }
            }
        }
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for &(v, id) in &self.params {
            if !store.get(id).trainable {
                continue;
            }
            match grads.raw(v) {
                Some(g) => store.accumulate_grad(id, g),
                None => {
                    let n = store.value(id).numel();
                    store.accumulate_grad(id, &vec![0.0; n]);
                }
            }
        }
    }
}
