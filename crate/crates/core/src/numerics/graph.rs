//! Reverse-mode differentiation over a closed set of matrix primitives.
//!
//! A [`Graph`] is a tape: every primitive evaluates eagerly when recorded and
//! remembers its inputs. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar node with respect to every node that
//! depends on a parameter leaf. Random inputs (Gumbel and Gaussian noise) are
//! recorded as constants, so a backward pass is a deterministic function of
//! the recorded values.

use std::collections::BTreeMap;

use super::params::ParamSet;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    AddRowBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Reshape(Var),
    Column(Var, usize),
    Row(Var, usize),
    PairwiseSqDist(Var, Var),
    RowLogSumExp(Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    WeightedSum(Var, Vec<f64>),
    Sum(Var),
    /// Row-wise hard argmax; has no gradient.
    HardOneHot,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::HardOneHot => "hard_one_hot",
            _ => "primitive",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter leaves of one [`ParamSet`] recorded on a graph, by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of every bound parameter into `params`' accumulators.
    pub fn accumulate_into(&self, bound: &BoundParams, params: &mut ParamSet) -> Result<()> {
        for (name, var) in bound.iter() {
            if let Some(g) = self.wrt(*var) {
                params.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{what}: incompatible shapes {a:?} and {b:?}"))
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf not owned by any [`ParamSet`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    /// Records every tensor of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParamSet) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = self.leaf(t.clone());
            vars.insert(name.clone(), v);
        }
        BoundParams { vars }
    }

    fn matrix(values: Vec<f64>, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], values).expect("internal shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.1 != db.0 {
            return Err(shape_err("matmul", da, db));
        }
        let (c, m, n) = gemm(
            self.value(a).values(),
            da,
            false,
            self.value(b).values(),
            db,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::matrix(c, m, n), Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.1 != db.1 {
            return Err(shape_err("matmul_nt", da, db));
        }
        let (c, m, n) = gemm(
            self.value(a).values(),
            da,
            false,
            self.value(b).values(),
            db,
            true,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::matrix(c, m, n), Op::MatMulNt(a, b), rg))
    }

    /// Adds the single row `r` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, r: Var) -> Result<Var> {
        let (da, dr) = (self.dims(a), self.dims(r));
        if dr.0 != 1 || dr.1 != da.1 {
            return Err(shape_err("add_row_broadcast", da, dr));
        }
        let row = self.value(r).values().to_vec();
        let mut out = self.value(a).values().to_vec();
        for chunk in out.chunks_mut(da.1.max(1)) {
            for (x, b) in chunk.iter_mut().zip(&row) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(r);
        Ok(self.push(Self::matrix(out, da.0, da.1), Op::AddRowBroadcast(a, r), rg))
    }

    /// Multiplies every row of `a` elementwise by the single row `r`.
    pub fn mul_row_broadcast(&mut self, a: Var, r: Var) -> Result<Var> {
        let (da, dr) = (self.dims(a), self.dims(r));
        if dr.0 != 1 || dr.1 != da.1 {
            return Err(shape_err("mul_row_broadcast", da, dr));
        }
        let row = self.value(r).values().to_vec();
        let mut out = self.value(a).values().to_vec();
        for chunk in out.chunks_mut(da.1.max(1)) {
            for (x, b) in chunk.iter_mut().zip(&row) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(r);
        Ok(self.push(Self::matrix(out, da.0, da.1), Op::MulRowBroadcast(a, r), rg))
    }

    /// Multiplies row `i` of `a` by the scalar `c[i]` of the column `c`.
    pub fn mul_col_broadcast(&mut self, a: Var, c: Var) -> Result<Var> {
        let (da, dc) = (self.dims(a), self.dims(c));
        if dc.1 != 1 || dc.0 != da.0 {
            return Err(shape_err("mul_col_broadcast", da, dc));
        }
        let col = self.value(c).values().to_vec();
        let mut out = self.value(a).values().to_vec();
        for (chunk, s) in out.chunks_mut(da.1.max(1)).zip(&col) {
            for x in chunk.iter_mut() {
                *x *= s;
            }
        }
        let rg = self.rg(a) || self.rg(c);
        Ok(self.push(Self::matrix(out, da.0, da.1), Op::MulColBroadcast(a, c), rg))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err(what, da, db));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::matrix(out, da.0, da.1), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.value(a).values().iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(Self::matrix(out, r, c), op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).clone().reshape(vec![rows, cols])?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Column `k` of `a` as an `m x 1` node.
    pub fn column(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if k >= c {
            return Err(Error::Shape(format!("column {k} out of range for {c} columns")));
        }
        let v = self.value(a);
        let out: Vec<f64> = (0..r).map(|i| v.get(i, k)).collect();
        let rg = self.rg(a);
        Ok(self.push(Self::matrix(out, r, 1), Op::Column(a, k), rg))
    }

    /// Row `k` of `a` as a `1 x n` node.
    pub fn row(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if k >= r {
            return Err(Error::Shape(format!("row {k} out of range for {r} rows")));
        }
        let out = self.value(a).row(k).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Self::matrix(out, 1, c), Op::Row(a, k), rg))
    }

    /// `D[i][j] = ||a_i - b_j||^2` between the rows of `a` and `b`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.1 != db.1 {
            return Err(shape_err("pairwise_sq_dist", da, db));
        }
        let out = sq_dist_matrix(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Self::matrix(out, da.0, db.0),
            Op::PairwiseSqDist(a, b),
            rg,
        ))
    }

    /// Log-sum-exp of every row, as an `m x 1` column.
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if c == 0 {
            return Err(Error::EmptyReduction);
        }
        let v = self.value(a);
        let out: Vec<f64> = (0..r).map(|i| lse(v.row(i))).collect();
        let rg = self.rg(a);
        Ok(self.push(Self::matrix(out, r, 1), Op::RowLogSumExp(a), rg))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(softmax_row(v.row(i)));
        }
        let rg = self.rg(a);
        self.push(Self::matrix(out, r, c), Op::RowSoftmax(a), rg)
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = v.row(i);
            let l = lse(row);
            out.extend(row.iter().map(|x| x - l));
        }
        let rg = self.rg(a);
        self.push(Self::matrix(out, r, c), Op::RowLogSoftmax(a), rg)
    }

    /// `sum_i weights[i] * (logsumexp(row_i) - row_i[targets[i]])`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r || weights.len() != r {
            return Err(Error::Shape(format!(
                "cross entropy over {r} rows got {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape(format!("target {t} out of range for {c} classes")));
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for i in 0..r {
            let row = v.row(i);
            total += weights[i] * (lse(row) - row[targets[i]]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// `sum_i weights[i] * a_i` over all elements of `a`.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let v = self.value(a);
        if weights.len() != v.len() {
            return Err(Error::Shape(format!(
                "weighted sum over {} values got {} weights",
                v.len(),
                weights.len()
            )));
        }
        let s = v.values().iter().zip(weights).map(|(x, w)| x * w).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise one-hot of the argmax (ties to the lowest index).
    pub fn hard_one_hot(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = v.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if c > 0 {
                out[i * c + best] = 1.0;
            }
        }
        let rg = self.rg(a);
        self.push(Self::matrix(out, r, c), Op::HardOneHot, rg)
    }

    /// Gradient of the scalar node `loss` with respect to every node that
    /// depends on a differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(
            vec![1, 1],
            vec![1.0],
        )?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if !self.rg(to) {
            return;
        }
        let (r, c) = self.dims(to);
        match &mut grads[to.0] {
            Some(acc) => acc.add_scaled(&g, 1.0),
            slot @ None => {
                *slot = Some(Self::matrix(g.into_values(), r, c));
            }
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let (d, m, n) = gemm(g.values(), g.dims2(), false, vb.values(), vb.dims2(), true);
                    self.send(grads, *a, Self::matrix(d, m, n));
                }
                if self.rg(*b) {
                    let (d, m, n) = gemm(va.values(), va.dims2(), true, g.values(), g.dims2(), false);
                    self.send(grads, *b, Self::matrix(d, m, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let (d, m, n) = gemm(g.values(), g.dims2(), false, vb.values(), vb.dims2(), false);
                    self.send(grads, *a, Self::matrix(d, m, n));
                }
                if self.rg(*b) {
                    let (d, m, n) = gemm(g.values(), g.dims2(), true, va.values(), va.dims2(), false);
                    self.send(grads, *b, Self::matrix(d, m, n));
                }
            }
            Op::AddRowBroadcast(a, r) => {
                self.send(grads, *a, g.clone());
                if self.rg(*r) {
                    self.send(grads, *r, col_sums(g));
                }
            }
            Op::MulRowBroadcast(a, r) => {
                let (va, vr) = (self.value(*a), self.value(*r));
                let c = g.cols().max(1);
                if self.rg(*a) {
                    let d: Vec<f64> = g
                        .values()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * vr.values()[i % c])
                        .collect();
                    self.send(grads, *a, Self::matrix(d, g.rows(), g.cols()));
                }
                if self.rg(*r) {
                    let prod = Self::matrix(
                        g.values().iter().zip(va.values()).map(|(x, y)| x * y).collect(),
                        g.rows(),
                        g.cols(),
                    );
                    self.send(grads, *r, col_sums(&prod));
                }
            }
            Op::MulColBroadcast(a, col) => {
                let (va, vc) = (self.value(*a), self.value(*col));
                let c = g.cols().max(1);
                if self.rg(*a) {
                    let d: Vec<f64> = g
                        .values()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * vc.values()[i / c])
                        .collect();
                    self.send(grads, *a, Self::matrix(d, g.rows(), g.cols()));
                }
                if self.rg(*col) {
                    let d: Vec<f64> = (0..g.rows())
                        .map(|i| g.row(i).iter().zip(va.row(i)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.send(grads, *col, Self::matrix(d, g.rows(), 1));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                if self.rg(*b) {
                    self.send(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.send(grads, *a, zip_map(g, vb, |x, y| x * y));
                }
                if self.rg(*b) {
                    self.send(grads, *b, zip_map(g, va, |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.send(grads, *a, g.map(|x| s * x));
            }
            Op::AddScalar(a) => self.send(grads, *a, g.clone()),
            Op::Exp(a) => self.send(grads, *a, zip_map(g, out, |x, y| x * y)),
            Op::Log(a) => {
                let va = self.value(*a);
                self.send(grads, *a, zip_map(g, va, |x, y| x / y));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.send(grads, *a, zip_map(g, va, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::Reshape(a) => {
                let (r, c) = self.dims(*a);
                self.send(grads, *a, Self::matrix(g.values().to_vec(), r, c));
            }
            Op::Column(a, k) => {
                let (r, c) = self.dims(*a);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + k] = g.values()[i];
                }
                self.send(grads, *a, Self::matrix(d, r, c));
            }
            Op::Row(a, k) => {
                let (r, c) = self.dims(*a);
                let mut d = vec![0.0; r * c];
                d[k * c..(k + 1) * c].copy_from_slice(g.values());
                self.send(grads, *a, Self::matrix(d, r, c));
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, f) = va.dims2();
                let n = vb.rows();
                if self.rg(*a) {
                    let mut d = vec![0.0; m * f];
                    for i in 0..m {
                        let ai = va.row(i);
                        let di = &mut d[i * f..(i + 1) * f];
                        for j in 0..n {
                            let w = 2.0 * g.get(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            for (t, (x, y)) in ai.iter().zip(vb.row(j)).enumerate() {
                                di[t] += w * (x - y);
                            }
                        }
                    }
                    self.send(grads, *a, Self::matrix(d, m, f));
                }
                if self.rg(*b) {
                    let mut d = vec![0.0; n * f];
                    for i in 0..m {
                        let ai = va.row(i);
                        for j in 0..n {
                            let w = 2.0 * g.get(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            let dj = &mut d[j * f..(j + 1) * f];
                            for (t, (x, y)) in ai.iter().zip(vb.row(j)).enumerate() {
                                dj[t] -= w * (x - y);
                            }
                        }
                    }
                    self.send(grads, *b, Self::matrix(d, n, f));
                }
            }
            Op::RowLogSumExp(a) => {
                let va = self.value(*a);
                let (r, c) = va.dims2();
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gi = g.values()[i];
                    d.extend(softmax_row(va.row(i)).into_iter().map(|p| gi * p));
                }
                self.send(grads, *a, Self::matrix(d, r, c));
            }
            Op::RowSoftmax(a) => {
                let (r, c) = out.dims2();
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let s = out.row(i);
                    let gi = g.row(i);
                    let dot: f64 = s.iter().zip(gi).map(|(x, y)| x * y).sum();
                    d.extend(s.iter().zip(gi).map(|(si, gij)| si * (gij - dot)));
                }
                self.send(grads, *a, Self::matrix(d, r, c));
            }
            Op::RowLogSoftmax(a) => {
                let (r, c) = out.dims2();
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gi = g.row(i);
                    let total: f64 = gi.iter().sum();
                    d.extend(out.row(i).iter().zip(gi).map(|(l, gij)| gij - l.exp() * total));
                }
                self.send(grads, *a, Self::matrix(d, r, c));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let v = self.value(*logits);
                let (r, c) = v.dims2();
                let s = g.item();
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let w = s * weights[i];
                    let mut p = softmax_row(v.row(i));
                    p[targets[i]] -= 1.0;
                    d.extend(p.into_iter().map(|x| w * x));
                }
                self.send(grads, *logits, Self::matrix(d, r, c));
            }
            Op::WeightedSum(a, w) => {
                let (r, c) = self.dims(*a);
                let s = g.item();
                self.send(grads, *a, Self::matrix(w.iter().map(|x| s * x).collect(), r, c));
            }
            Op::Sum(a) => {
                let (r, c) = self.dims(*a);
                self.send(grads, *a, Self::matrix(vec![g.item(); r * c], r, c));
            }
            Op::HardOneHot => return Err(Error::UnsupportedPrimitive(op.name())),
        }
        Ok(())
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let (r, c) = g.dims2();
    let mut s = vec![0.0; c];
    for i in 0..r {
        for (acc, x) in s.iter_mut().zip(g.row(i)) {
            *acc += x;
        }
    }
    Tensor::new(vec![1, c], s).expect("internal shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = a.dims2();
    Tensor::new(
        vec![r, c],
        a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("internal shape")
}

pub(crate) fn lse(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub(crate) fn sq_dist_matrix(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let m = a.rows();
    let n = b.rows();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..n {
            out.push(sq_dist(ai, b.row(j)));
        }
    }
    out
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
