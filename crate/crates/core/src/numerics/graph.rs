//! Tape-based reverse-mode autodiff over a fixed op set.
//!
//! Every op evaluates eagerly and appends a node; [`Graph::backward`] walks the
//! tape in reverse. The op set is exactly what the transformer, the routing
//! layers and the losses need.

use statrs::function::erf::erfc;

use super::tensor::{log_softmax_in_place, matmul, matmul_nt, matmul_tn, softmax_rows, Tensor};
use crate::error::{dim_err, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Tensor),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    RepeatRows(Var, usize),
    ConcatRows(Vec<Var>),
    SelectCols(Var, usize),
    Attention { q: Var, k: Var, v: Var, batches: usize, tokens: usize, heads: usize, probs: Vec<f64> },
    NormalCdf(Var),
    CvSquared(Var),
    AssembleTokens { patches: Var, cls: Var, pos: Var, batches: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients indexed by [`Var`]; `None` when a node does not depend on any leaf.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatmulNt(a, b), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.cols() != bv.len() {
            return dim_err(format!("bias of length {} for {} columns", bv.len(), xv.cols()));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Scales row `i` of `x` by `s[i]`, where `s` has one column.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(s);
        if sv.len() != xv.rows() {
            return dim_err(format!("mul_col: {} scales for {} rows", sv.len(), xv.rows()));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for (row, &sc) in out.data_mut().chunks_mut(c.max(1)).zip(sv.data()) {
            for o in row.iter_mut() {
                *o *= sc;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulCol(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `x + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(x).add(c)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    /// `x ∘ c` for a constant `c` of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let out = self.value(x).mul(&c)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c == 0 {
            return dim_err("log_softmax over an empty last axis");
        }
        for row in out.data_mut().chunks_mut(c) {
            log_softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(out, Op::Log(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return dim_err("layer_norm parameter length mismatch");
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = xv.clone();
        for (xr, orow) in xhat.data_mut().chunks_mut(c).zip(out.data_mut().chunks_mut(c)) {
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                xr[j] = (xr[j] - mean) * inv;
                orow[j] = xr[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Column sums as a `[1×c]` matrix.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut out = vec![0.0; c];
        for row in v.data().chunks(c.max(1)) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![1, c], out).expect("shape"), Op::SumRows(x), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return dim_err(format!("gather_rows index {bad} out of {} rows", v.rows()));
        }
        let out = v.select_rows(&idx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, idx), rg))
    }

    /// Output has `rows` rows; row `idx[i]` accumulates input row `i`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Vec<usize>, rows: usize) -> Result<Var> {
        let v = self.value(x);
        if idx.len() != v.rows() {
            return dim_err("scatter_add_rows index length mismatch");
        }
        let c = v.cols();
        let mut out = Tensor::zeros(&[rows, c]);
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= rows {
                return dim_err(format!("scatter_add_rows target {dst} out of {rows}"));
            }
            let src = v.row(i).to_vec();
            for (o, s) in out.row_mut(dst).iter_mut().zip(src) {
                *o += s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ScatterAddRows(x, idx), rg))
    }

    /// Picks `x[r, c]` for each pair, as a `[len×1]` column.
    pub fn gather_elems(&mut self, x: Var, at: Vec<(usize, usize)>) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(at.len());
        for &(i, j) in &at {
            if i >= r || j >= c {
                return dim_err(format!("gather_elems ({i},{j}) out of [{r}×{c}]"));
            }
            out.push(v.get2(i, j));
        }
        let rg = self.rg(x);
        let n = out.len();
        Ok(self.push(Tensor::new(vec![n, 1], out).expect("shape"), Op::GatherElems(x, at), rg))
    }

    /// Repeats each row of `x` `block` times: row `i` of the output is row `i / block` of `x`.
    pub fn repeat_rows(&mut self, x: Var, block: usize) -> Var {
        let v = self.value(x);
        let idx: Vec<usize> = (0..v.rows() * block).map(|i| i / block).collect();
        let out = v.select_rows(&idx);
        let rg = self.rg(x);
        self.push(out, Op::RepeatRows(x, block), rg)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts), rg))
    }

    /// Columns `start..start + len`.
    pub fn select_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.cols() {
            return dim_err("select_cols out of range");
        }
        let out = v.select_cols(start, len);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SelectCols(x, start), rg))
    }

    /// Multi-head scaled dot-product attention over `batches` sequences of
    /// `tokens` rows each; `q`, `k`, `v` are `[batches·tokens × D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batches: usize, tokens: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if qv.rows() != batches * tokens || kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return dim_err("attention input shape mismatch");
        }
        if heads == 0 || d % heads != 0 {
            return dim_err(format!("hidden {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batches * heads * tokens * tokens];
        let mut out = Tensor::zeros(&[batches * tokens, d]);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batches {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * tokens * tokens..][..tokens * tokens];
                for i in 0..tokens {
                    let qi = &qd[(b * tokens + i) * d + h * dh..][..dh];
                    let row = &mut p[i * tokens..(i + 1) * tokens];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kd[(b * tokens + j) * d + h * dh..][..dh];
                        *s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    super::tensor::softmax_in_place(row);
                }
                let od = out.data_mut();
                for i in 0..tokens {
                    for j in 0..tokens {
                        let pij = p[i * tokens + j];
                        let vj = &vd[(b * tokens + j) * d + h * dh..][..dh];
                        let oi = &mut od[(b * tokens + i) * d + h * dh..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, batches, tokens, heads, probs }, rg))
    }

    pub fn normal_cdf(&mut self, x: Var) -> Var {
        let out = self.value(x).map(normal_cdf);
        let rg = self.rg(x);
        self.push(out, Op::NormalCdf(x), rg)
    }

    /// Squared coefficient of variation (population) over all entries; 0 when the mean is 0.
    pub fn cv_squared(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.len().max(1) as f64;
        let mean = v.sum() / n;
        let out = if mean.abs() < 1e-300 {
            0.0
        } else {
            let var = v.data().iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            var / (mean * mean)
        };
        let rg = self.rg(x);
        self.push(Tensor::scalar(out), Op::CvSquared(x), rg)
    }

    /// Builds the token sequence: per example, `[cls; patches] + pos`.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batches: usize) -> Result<Var> {
        let (pv, cv, posv) = (self.value(patches), self.value(cls), self.value(pos));
        let d = pv.cols();
        let tokens = posv.rows();
        if cv.len() != d || posv.cols() != d || pv.rows() != batches * (tokens - 1) {
            return dim_err("assemble_tokens shape mismatch");
        }
        let per = tokens - 1;
        let mut out = Tensor::zeros(&[batches * tokens, d]);
        for b in 0..batches {
            for t in 0..tokens {
                let src = if t == 0 { cv.data() } else { pv.row(b * per + t - 1) };
                let prow = posv.row(t);
                let orow = &mut out.data_mut()[(b * tokens + t) * d..][..d];
                for j in 0..d {
                    orow[j] = src[j] + prow[j];
                }
            }
        }
        let rg = self.rg(patches) || self.rg(cls) || self.rg(pos);
        Ok(self.push(out, Op::AssembleTokens { patches, cls, pos, batches }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return dim_err("backward needs a scalar loss");
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.rg(*a) {
                    acc(*a, matmul_nt(g, self.value(*b))?)?;
                }
                if self.rg(*b) {
                    acc(*b, matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::MatmulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    acc(*a, matmul(g, self.value(*b))?)?;
                }
                if self.rg(*b) {
                    acc(*b, matmul_tn(g, self.value(*a))?)?;
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone())?;
                if self.rg(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.mul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    acc(*b, g.mul(self.value(*a))?)?;
                }
            }
            Op::MulCol(x, s) => {
                let sv = self.value(*s);
                let c = g.cols();
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for (row, &sc) in dx.data_mut().chunks_mut(c.max(1)).zip(sv.data()) {
                        for v in row.iter_mut() {
                            *v *= sc;
                        }
                    }
                    acc(*x, dx)?;
                }
                if self.rg(*s) {
                    let xv = self.value(*x);
                    let ds: Vec<f64> = g
                        .data()
                        .chunks(c.max(1))
                        .zip(xv.data().chunks(c.max(1)))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*s, Tensor::new(sv.shape().to_vec(), ds)?)?;
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s))?,
            Op::AddConst(x) => acc(*x, g.clone())?,
            Op::MulConst(x, c) => acc(*x, g.mul(c)?)?,
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (d, yv) in dr.iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                acc(*x, dx)?;
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let total: f64 = dr.iter().sum();
                    for (d, yv) in dr.iter_mut().zip(yr) {
                        *d -= yv.exp() * total;
                    }
                }
                acc(*x, dx)?;
            }
            Op::Log(x) => acc(*x, g.zip_map(self.value(*x), |a, b| a / b)?)?,
            Op::Gelu(x) => acc(*x, g.zip_map(self.value(*x), |a, b| a * gelu_grad(b))?)?,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = g.cols();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, xr) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    acc(*gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)?)?;
                    acc(*beta, Tensor::new(self.value(*beta).shape().to_vec(), db)?)?;
                }
                if self.rg(*x) {
                    let mut dx = g.clone();
                    let n = c as f64;
                    for ((dr, xr), &inv) in dx.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)).zip(inv_std) {
                        let dxhat: Vec<f64> = dr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = inv / n * (n * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                    acc(*x, dx)?;
                }
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), g.data()[0]))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), g.data()[0] / xv.len().max(1) as f64))?;
            }
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for row in dx.data_mut().chunks_mut(c.max(1)) {
                    row.copy_from_slice(g.data());
                }
                acc(*x, dx)?;
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for (i, &src) in idx.iter().enumerate() {
                    for (d, v) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                acc(*x, dx)?;
            }
            Op::ScatterAddRows(x, idx) => {
                let xv = self.value(*x);
                let dx = g.select_rows(idx).reshape(xv.shape())?;
                acc(*x, dx)?;
            }
            Op::GatherElems(x, at) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &(i, j)) in at.iter().enumerate() {
                    dx.data_mut()[i * c + j] += g.data()[k];
                }
                acc(*x, dx)?;
            }
            Op::RepeatRows(x, block) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..g.rows() {
                    for (d, v) in dx.row_mut(i / block).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                acc(*x, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let r = pv.rows();
                    let idx: Vec<usize> = (start..start + r).collect();
                    if self.rg(p) {
                        acc(p, g.select_rows(&idx).reshape(pv.shape())?)?;
                    }
                    start += r;
                }
            }
            Op::SelectCols(x, start) => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..g.rows() {
                    dx.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                acc(*x, dx)?;
            }
            Op::Attention { q, k, v, batches, tokens, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let t = *tokens;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(qv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
                let mut ds = vec![0.0; t * t];
                for b in 0..*batches {
                    for h in 0..*heads {
                        let p = &probs[(b * heads + h) * t * t..][..t * t];
                        let off = |row: usize| (b * t + row) * d + h * dh;
                        // dV = Pᵀ dO ; dP = dO Vᵀ
                        for i in 0..t {
                            let go = &gd[off(i)..][..dh];
                            for j in 0..t {
                                let pij = p[i * t + j];
                                let dvj = &mut dv.data_mut()[off(j)..][..dh];
                                for (a, x) in dvj.iter_mut().zip(go) {
                                    *a += pij * x;
                                }
                                let vj = &vd[off(j)..][..dh];
                                ds[i * t + j] = go.iter().zip(vj).map(|(a, x)| a * x).sum();
                            }
                            let row_p = &p[i * t..(i + 1) * t];
                            let dot: f64 = ds[i * t..(i + 1) * t].iter().zip(row_p).map(|(a, x)| a * x).sum();
                            for j in 0..t {
                                ds[i * t + j] = row_p[j] * (ds[i * t + j] - dot) * scale;
                            }
                        }
                        for i in 0..t {
                            for j in 0..t {
                                let s = ds[i * t + j];
                                if s == 0.0 {
                                    continue;
                                }
                                let kj = &kd[off(j)..][..dh];
                                let dqi = &mut dq.data_mut()[off(i)..][..dh];
                                for (a, x) in dqi.iter_mut().zip(kj) {
                                    *a += s * x;
                                }
                                let qi = &qd[off(i)..][..dh];
                                let dkj = &mut dk.data_mut()[off(j)..][..dh];
                                for (a, x) in dkj.iter_mut().zip(qi) {
                                    *a += s * x;
                                }
                            }
                        }
                    }
                }
                acc(*q, dq)?;
                acc(*k, dk)?;
                acc(*v, dv)?;
            }
            Op::NormalCdf(x) => {
                acc(*x, g.zip_map(self.value(*x), |a, b| a * INV_SQRT_2PI * (-0.5 * b * b).exp())?)?;
            }
            Op::CvSquared(x) => {
                let xv = self.value(*x);
                let n = xv.len().max(1) as f64;
                let mean = xv.sum() / n;
                if mean.abs() < 1e-300 {
                    acc(*x, Tensor::zeros(xv.shape()))?;
                } else {
                    let var = xv.data().iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
                    let gs = g.data()[0];
                    let dx = xv.map(|a| {
                        gs * ((2.0 / n) * (a - mean) / (mean * mean) - 2.0 * var / (mean * mean * mean) / n)
                    });
                    acc(*x, dx)?;
                }
            }
            Op::AssembleTokens { patches, cls, pos, batches } => {
                let posv = self.value(*pos);
                let tokens = posv.rows();
                let per = tokens - 1;
                let d = posv.cols();
                let mut dp = Tensor::zeros(self.value(*patches).shape());
                let mut dc = Tensor::zeros(self.value(*cls).shape());
                let mut dpos = Tensor::zeros(posv.shape());
                for b in 0..*batches {
                    for t in 0..tokens {
                        let gr = &g.data()[(b * tokens + t) * d..][..d];
                        for (a, x) in dpos.row_mut(t).iter_mut().zip(gr) {
                            *a += x;
                        }
                        if t == 0 {
                            for (a, x) in dc.data_mut().iter_mut().zip(gr) {
                                *a += x;
                            }
                        } else {
                            dp.row_mut(b * per + t - 1).copy_from_slice(gr);
                        }
                    }
                }
                acc(*patches, dp)?;
                acc(*cls, dc)?;
                acc(*pos, dpos)?;
            }
        }
        Ok(())
    }
}
