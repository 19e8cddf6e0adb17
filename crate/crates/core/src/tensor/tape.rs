//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] borrows a [`ParamStore`] read-only, records every op executed
//! through it and replays the list backwards in [`Tape::backward`]. Each
//! forward pass owns its own tape, so passes over different inputs can run on
//! separate threads against the same store.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::{kernels, Real, Tensor};
use crate::error::{Error, Result};

/// Index of a recorded value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Gelu(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    GatherRows(Var, Vec<usize>),
    Mean(Vec<Var>),
    SumAll(Var),
    Reshape(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.matrix_dims()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite output from {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant. With `requires_grad` its gradient is reported by
    /// [`Gradients::leaf`].
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same [`Var`].
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.params.get(id);
        let v = self.push(p.tensor.clone(), Op::Param(id), p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// Parameters that have been read by this tape so far.
    pub fn params_used(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.param_vars.keys().copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_bt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(sa.to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a length-`n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        if self.value(row).numel() != n {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.data(row);
        let out: Vec<T> = self
            .data(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.map(a, |x| x * c);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.data(s)[0];
        let t = self.map(a, |x| x * c);
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(t, Op::ScaleBy(a, s), ng))
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, gelu_scalar);
        let ng = self.needs(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.exp());
        let ng = self.needs(a);
        self.push(t, Op::Exp(a), ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let t = self.map(a, |x| x.max(lo).min(hi));
        let ng = self.needs(a);
        self.push(t, Op::Clamp(a, lo, hi), ng)
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    ///
    /// With `key_mask`, column `j` takes part only when `key_mask[j]` is true;
    /// masked entries are exactly zero and receive zero gradient.
    pub fn softmax(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (_, n) = self.dims(a);
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(shape_err("softmax mask", self.shape(a), &[mask.len()]));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::contract("softmax mask excludes every key"));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
        let mut out = Vec::with_capacity(self.value(a).numel());
        for row in self.data(a).chunks(n) {
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &x)| x)
                .fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut sum = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = if keep(j) { (x - max).exp() } else { T::zero() };
                sum += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= sum);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), ng))
    }

    /// Normalizes each row to zero mean and unit variance (biased estimator),
    /// then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (_, d) = self.dims(x);
        if d < 2 {
            return Err(Error::contract("layer_norm needs at least two features"));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let dn = T::lit(d as f64);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(self.value(x).numel());
        let mut rstd = Vec::new();
        let mut out = Vec::with_capacity(xhat.capacity());
        for row in self.data(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (_, n) = self.dims(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (m, _) = self.dims(first);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, c) = self.dims(p);
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Sub-matrix `[row0, row0 + rows) x [col0, col0 + cols)`.
    pub fn slice(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if row0 + rows > m || col0 + cols > n || rows == 0 || cols == 0 {
            return Err(shape_err("slice", self.shape(x), &[row0, rows, col0, cols]));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&src[i * n + col0..i * n + col0 + cols]);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::Slice { x, row0, col0 }, ng))
    }

    pub fn rows(&mut self, x: Var, row0: usize, rows: usize) -> Result<Var> {
        let (_, n) = self.dims(x);
        self.slice(x, row0, rows, 0, n)
    }

    /// `out[i] = x[indices[i]]`; used for embedding lookups and reordering.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if indices.is_empty() {
            return Err(Error::contract("gather of no rows"));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(shape_err("gather_rows", self.shape(x), &[i]));
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![indices.len(), n], out)?,
            Op::GatherRows(x, indices.to_vec()),
            ng,
        ))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("mean of nothing"))?;
        let shape = self.shape(first).to_vec();
        let mut acc = vec![T::zero(); self.value(first).numel()];
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(shape_err("mean_of", &shape, self.shape(p)));
            }
            acc.iter_mut().zip(self.data(p)).for_each(|(a, &b)| *a += b);
        }
        let k = T::lit(parts.len() as f64);
        acc.iter_mut().for_each(|a| *a /= k);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(shape, acc)?, Op::Mean(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::contract("cannot normalize a zero row"));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::L2NormalizeRows { x, norms }, ng))
    }

    /// Mean softmax cross-entropy of each row of `logits` against its target
    /// column.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::contract(format!(
                "target {t} out of range for {n} classes"
            )));
        }
        let mut probs = Vec::with_capacity(m * n);
        let mut loss = T::zero();
        for (row, &t) in self.data(logits).chunks(n).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().map(|&x| (x - max).exp()).sum::<T>();
            let lse = max + sum.ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        loss /= T::lit(m as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut out = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            match node.op {
                Op::Param(id) => out.params[id.index()] = Some(g),
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                if let Some(ga) = slot(nodes, grads, a) {
                    kernels::matmul_bt(g, self.data(b), ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    kernels::matmul_at(self.data(a), g, gb, k, m, n);
                }
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).0;
                if let Some(ga) = slot(nodes, grads, a) {
                    kernels::matmul(g, self.data(b), ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    kernels::matmul_at(g, self.data(a), gb, n, m, k);
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = self.dims(a);
                if let Some(ga) = slot(nodes, grads, a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    add_into(gb, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(self.data(b)) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(self.data(a)) {
                        *x += gy * av;
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    add_into(ga, g);
                }
                if let Some(gr) = slot(nodes, grads, row) {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c);
                }
            }
            &Op::ScaleBy(a, s) => {
                let c = self.data(s)[0];
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c);
                }
                if let Some(gs) = slot(nodes, grads, s) {
                    let dot: T = g.iter().zip(self.data(a)).map(|(&x, &y)| x * y).sum();
                    gs[0] += dot;
                }
            }
            &Op::Gelu(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(self.data(a)) {
                        *x += gy * gelu_grad(v);
                    }
                }
            }
            &Op::Exp(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, &gy), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * yv;
                    }
                }
            }
            &Op::Clamp(a, lo, hi) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(self.data(a)) {
                        if v >= lo && v <= hi {
                            *x += gy;
                        }
                    }
                }
            }
            &Op::Softmax(a) => {
                let (_, n) = self.dims(a);
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((gx, gy), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = gy.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            gx[j] += yr[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (_, d) = self.dims(*x);
                let dn = T::lit(d as f64);
                let gam = self.data(*gamma);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, ((gxr, gyr), hr)) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mut mean_g = T::zero();
                        let mut mean_gh = T::zero();
                        for j in 0..d {
                            let gh = gyr[j] * gam[j];
                            mean_g += gh;
                            mean_gh += gh * hr[j];
                        }
                        mean_g /= dn;
                        mean_gh /= dn;
                        for j in 0..d {
                            let gh = gyr[j] * gam[j];
                            gxr[j] += rstd[r] * (gh - mean_g - hr[j] * mean_gh);
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (gyr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gyr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for gyr in g.chunks(d) {
                        add_into(gb, gyr);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(gp) = slot(nodes, grads, p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.matrix_dims();
                let mut col = 0;
                for &p in parts {
                    let (_, c) = nodes[p.0].value.matrix_dims();
                    if let Some(gp) = slot(nodes, grads, p) {
                        for r in 0..m {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + col..r * total + col + c]);
                        }
                    }
                    col += c;
                }
            }
            &Op::Slice { x, row0, col0 } => {
                let (_, n) = self.dims(x);
                let (rows, cols) = node.value.matrix_dims();
                if let Some(gx) = slot(nodes, grads, x) {
                    for r in 0..rows {
                        let dst = (row0 + r) * n + col0;
                        add_into(&mut gx[dst..dst + cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::GatherRows(x, indices) => {
                let (_, n) = self.dims(*x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, &src) in indices.iter().enumerate() {
                        add_into(&mut gx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Mean(parts) => {
                let k = T::lit(parts.len() as f64);
                for &p in parts {
                    if let Some(gp) = slot(nodes, grads, p) {
                        gp.iter_mut().zip(g).for_each(|(x, &y)| *x += y / k);
                    }
                }
            }
            &Op::SumAll(x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    add_into(gx, g);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (_, n) = self.dims(*x);
                let y = node.value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, ((gxr, gyr), yr)) in
                        gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate()
                    {
                        let dot: T = gyr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            gxr[j] += (gyr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = self.dims(*logits);
                let scale = g[0] / T::lit(m as f64);
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * n + j] += scale * (probs[r * n + j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Zero-initialized gradient buffer of `v`, or None if `v` is inert.
fn slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}
