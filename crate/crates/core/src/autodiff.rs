//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order and the backward pass is a single reverse sweep.
//! Parameters enter the graph through [`Graph::param`]; after
//! [`Graph::backward_into`] their gradients land in the matching
//! [`ParamStore`] slots.
//!
//! Shape errors inside the graph are programming errors and panic. The public
//! layer helpers in [`crate::nn`] validate user-facing shapes up front and
//! return [`Error::Shape`] instead.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    RowGroupSum(Var, Arc<Vec<Vec<usize>>>, Vec<f64>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    Cosine(Var, Var, f64),
    GroupMeanCols(Var, Arc<Vec<Vec<usize>>>),
    GroupMaxCols(Var, Vec<usize>),
    ScatterCols(Var, Arc<Vec<Option<usize>>>),
    CrossEntropy(Var, Arc<Vec<usize>>),
    Dice(Var, Arc<Vec<usize>>, f64),
    GaussianKl([Var; 4]),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation graph with recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    poisoned: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
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

    /// Error if any recorded operation produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match &self.poisoned {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.poisoned.is_none() && !value.all_finite() {
            self.poisoned = Some(op_name(&op).to_string());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient is reported for it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable parameter; repeated calls with the same name reuse the node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::matrix(t.rows(), t.cols(), data);
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.same_shape(tb), "elementwise shape mismatch {:?} vs {:?}", ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::matrix(ta.rows(), ta.cols(), data);
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_bt inner dimension");
        let mut out = vec![0.0; n * m];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push(Tensor::matrix(n, m, out), Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Add a `1 x d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (n, d) = self.dims(x);
        assert_eq!(self.dims(row), (1, d), "add_row width");
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (a, b) in chunk.iter_mut().zip(&r) {
                *a += b;
            }
        }
        self.push(Tensor::matrix(n, d, data), Op::AddRow(x, row))
    }

    /// Multiply every row of `x` elementwise by a `1 x d` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (n, d) = self.dims(x);
        assert_eq!(self.dims(row), (1, d), "mul_row width");
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (a, b) in chunk.iter_mut().zip(&r) {
                *a *= b;
            }
        }
        self.push(Tensor::matrix(n, d, data), Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    /// Multiply `x` by a `1 x 1` variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert!(self.value(s).is_scalar(), "scale_by needs a scalar");
        let sv = self.value(s).item();
        self.unary(x, Op::ScaleBy(x, s), |v| v * sv)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Column means, `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.dims(x);
        let mut out = vec![0.0; d];
        for r in self.value(x).data().chunks(d) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push(Tensor::matrix(1, d, out), Op::MeanRows(x))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let (n, d) = self.dims(x);
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            assert!(i < n, "gather index {i} out of {n} rows");
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::matrix(idx.len(), d, data);
        self.push(value, Op::GatherRows(x, Arc::new(idx)))
    }

    /// `out[g] = weight[g] * sum of rows in groups[g]`.
    pub fn row_group_sum(&mut self, x: Var, groups: Vec<Vec<usize>>, weights: Vec<f64>) -> Var {
        assert_eq!(groups.len(), weights.len());
        let (_, d) = self.dims(x);
        let t = self.value(x);
        let mut data = vec![0.0; groups.len() * d];
        for (g, rows) in groups.iter().enumerate() {
            let out = &mut data[g * d..(g + 1) * d];
            for &r in rows {
                for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o *= weights[g]);
        }
        let value = Tensor::matrix(groups.len(), d, data);
        self.push(value, Op::RowGroupSum(x, Arc::new(groups), weights))
    }

    /// Row means per group.
    pub fn row_group_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let w = groups
            .iter()
            .map(|g| {
                assert!(!g.is_empty(), "empty row group");
                1.0 / g.len() as f64
            })
            .collect();
        self.row_group_sum(x, groups, w)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (n, d) = self.dims(x);
        assert!(start < end && end <= d, "slice_cols range");
        let t = self.value(x);
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        self.push(Tensor::matrix(n, end - start, data), Op::SliceCols(x, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            assert_eq!(c, d, "concat_rows width");
            data.extend_from_slice(self.value(p).data());
            n += r;
        }
        self.push(Tensor::matrix(n, d, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, n, "concat_cols rows");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.push(Tensor::matrix(n, total, data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(Tensor::matrix(n, d, data), Op::SoftmaxRows(x))
    }

    /// Pairwise cosine similarity `x[n x d], p[r x d] -> n x r`,
    /// `a.b / (|a||b| + eps)`.
    pub fn cosine(&mut self, x: Var, p: Var, eps: f64) -> Var {
        let (n, d) = self.dims(x);
        let (r, d2) = self.dims(p);
        assert_eq!(d, d2, "cosine width");
        let xn = row_norms(self.value(x));
        let pn = row_norms(self.value(p));
        let mut out = vec![0.0; n * r];
        matmul_bt_acc(self.value(x).data(), self.value(p).data(), &mut out, n, d, r);
        for t in 0..n {
            for j in 0..r {
                out[t * r + j] /= xn[t] * pn[j] + eps;
            }
        }
        self.push(Tensor::matrix(n, r, out), Op::Cosine(x, p, eps))
    }

    /// Column means per group, `n x c -> n x groups`.
    pub fn group_mean_cols(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let (n, c) = self.dims(x);
        let t = self.value(x);
        let g = groups.len();
        let mut data = vec![0.0; n * g];
        for row in 0..n {
            let src = &t.data()[row * c..(row + 1) * c];
            for (gi, cols) in groups.iter().enumerate() {
                assert!(!cols.is_empty(), "empty column group");
                let s: f64 = cols.iter().map(|&j| src[j]).sum();
                data[row * g + gi] = s / cols.len() as f64;
            }
        }
        self.push(Tensor::matrix(n, g, data), Op::GroupMeanCols(x, Arc::new(groups)))
    }

    /// Column maxima per group, ties resolved to the first listed column.
    pub fn group_max_cols(&mut self, x: Var, groups: &[Vec<usize>]) -> Var {
        let (n, c) = self.dims(x);
        let t = self.value(x);
        let g = groups.len();
        let mut data = vec![0.0; n * g];
        let mut arg = vec![0usize; n * g];
        for row in 0..n {
            let src = &t.data()[row * c..(row + 1) * c];
            for (gi, cols) in groups.iter().enumerate() {
                assert!(!cols.is_empty(), "empty column group");
                let mut best = cols[0];
                for &j in &cols[1..] {
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                data[row * g + gi] = src[best];
                arg[row * g + gi] = best;
            }
        }
        self.push(Tensor::matrix(n, g, data), Op::GroupMaxCols(x, arg))
    }

    /// Spread columns of `x` into a wider matrix; `map[j] = Some(k)` copies
    /// column `k` of `x`, `None` fills with `fill`.
    pub fn scatter_cols(&mut self, x: Var, map: Vec<Option<usize>>, fill: f64) -> Var {
        let (n, c) = self.dims(x);
        let t = self.value(x);
        let w = map.len();
        let mut data = vec![fill; n * w];
        for row in 0..n {
            for (j, src) in map.iter().enumerate() {
                if let Some(k) = *src {
                    assert!(k < c);
                    data[row * w + j] = t.data()[row * c + k];
                }
            }
        }
        self.push(Tensor::matrix(n, w, data), Op::ScatterCols(x, Arc::new(map)))
    }

    /// Mean softmax cross-entropy of `logits[n x c]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Var {
        let (n, c) = self.dims(logits);
        assert_eq!(labels.len(), n, "cross_entropy label count");
        let t = self.value(logits);
        let mut total = 0.0;
        for (row, &y) in t.data().chunks(c).zip(labels.iter()) {
            assert!(y < c, "label out of range");
            total += log_sum_exp(row) - row[y];
        }
        self.push(Tensor::scalar(total / n as f64), Op::CrossEntropy(logits, labels))
    }

    /// Soft dice loss averaged over the classes present in `labels`.
    pub fn dice(&mut self, probs: Var, labels: Arc<Vec<usize>>, smooth: f64) -> Var {
        let (n, c) = self.dims(probs);
        assert_eq!(labels.len(), n, "dice label count");
        let stats = dice_stats(self.value(probs), &labels, c);
        let mut total = 0.0;
        let mut present = 0usize;
        for s in &stats {
            if s.count > 0.0 {
                total += 1.0 - (2.0 * s.inter + smooth) / (s.prob_sum + s.count + smooth);
                present += 1;
            }
        }
        let loss = if present == 0 { 0.0 } else { total / present as f64 };
        self.push(Tensor::scalar(loss), Op::Dice(probs, labels, smooth))
    }

    /// Closed-form KL between diagonal Gaussians, summed over every element.
    pub fn gaussian_kl(&mut self, q_mean: Var, q_std: Var, p_mean: Var, p_std: Var) -> Var {
        let vars = [q_mean, q_std, p_mean, p_std];
        let (n, d) = self.dims(q_mean);
        for &v in &vars[1..] {
            assert_eq!(self.dims(v), (n, d), "gaussian_kl shape");
        }
        let (qm, qs, pm, ps) = (
            self.value(q_mean).data(),
            self.value(q_std).data(),
            self.value(p_mean).data(),
            self.value(p_std).data(),
        );
        let mut kl = 0.0;
        for i in 0..qm.len() {
            kl += kl_term(qm[i], qs[i], pm[i], ps[i]);
        }
        self.push(Tensor::scalar(kl), Op::GaussianKl(vars))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check_finite()?;
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(root_val.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("backward through {}", op_name(&self.nodes[i].op)),
                });
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that adds `scale * d root / d param` into the store's
    /// gradient slots.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore, scale: f64) -> Result<()> {
        let grads = self.backward(root)?;
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                let slot = store
                    .grad_mut(name)
                    .ok_or_else(|| Error::MissingGradient(name.clone()))?;
                for (s, x) in slot.data_mut().iter_mut().zip(g.data()) {
                    *s += scale * x;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                let mut da = vec![0.0; n * k];
                matmul_bt_acc(g.data(), self.value(*b).data(), &mut da, n, m, k);
                let mut db = vec![0.0; k * m];
                matmul_at_acc(self.value(*a).data(), g.data(), &mut db, n, k, m);
                acc(grads, *a, Tensor::matrix(n, k, da));
                acc(grads, *b, Tensor::matrix(k, m, db));
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).0;
                let mut da = vec![0.0; n * k];
                matmul_acc(g.data(), self.value(*b).data(), &mut da, n, m, k);
                let mut db = vec![0.0; m * k];
                matmul_at_acc(g.data(), self.value(*a).data(), &mut db, n, m, k);
                acc(grads, *a, Tensor::matrix(n, k, da));
                acc(grads, *b, Tensor::matrix(m, k, db));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                acc(grads, *b, zip(g, self.value(*a), |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                acc(grads, *x, g.clone());
                acc(grads, *row, col_sums(g));
            }
            Op::MulRow(x, row) => {
                let d = g.cols();
                let r = self.value(*row).data();
                let xv = self.value(*x).data();
                let mut dx = g.data().to_vec();
                let mut dr = vec![0.0; d];
                for (k, v) in dx.iter_mut().enumerate() {
                    dr[k % d] += *v * xv[k];
                    *v *= r[k % d];
                }
                acc(grads, *x, Tensor::matrix(g.rows(), d, dx));
                acc(grads, *row, Tensor::matrix(1, d, dr));
            }
            Op::Scale(x, s) => acc(grads, *x, map(g, |v| v * s)),
            Op::AddScalar(x) => acc(grads, *x, g.clone()),
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                acc(grads, *x, map(g, |v| v * sv));
                let ds = dot(g.data(), self.value(*x).data());
                acc(grads, *s, Tensor::scalar(ds));
            }
            Op::Relu(x) => acc(grads, *x, zip(g, out, |gv, y| if y > 0.0 { gv } else { 0.0 })),
            Op::Tanh(x) => acc(grads, *x, zip(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Softplus(x) => acc(grads, *x, zip(g, self.value(*x), |gv, v| gv * sigmoid(v))),
            Op::Exp(x) => acc(grads, *x, zip(g, out, |gv, y| gv * y)),
            Op::Square(x) => acc(grads, *x, zip(g, self.value(*x), |gv, v| 2.0 * gv * v)),
            Op::Sum(x) => {
                let t = self.value(*x);
                acc(grads, *x, Tensor::matrix(t.rows(), t.cols(), vec![g.item(); t.len()]));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let v = g.item() / t.len() as f64;
                acc(grads, *x, Tensor::matrix(t.rows(), t.cols(), vec![v; t.len()]));
            }
            Op::MeanRows(x) => {
                let (n, d) = self.dims(*x);
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n {
                    data.extend(g.data().iter().map(|v| v / n as f64));
                }
                acc(grads, *x, Tensor::matrix(n, d, data));
            }
            Op::GatherRows(x, idx) => {
                let (n, d) = self.dims(*x);
                let mut dx = vec![0.0; n * d];
                for (k, &r) in idx.iter().enumerate() {
                    for (o, v) in dx[r * d..(r + 1) * d].iter_mut().zip(g.row_slice(k)) {
                        *o += v;
                    }
                }
                acc(grads, *x, Tensor::matrix(n, d, dx));
            }
            Op::RowGroupSum(x, groups, weights) => {
                let (n, d) = self.dims(*x);
                let mut dx = vec![0.0; n * d];
                for (gi, rows) in groups.iter().enumerate() {
                    let src = g.row_slice(gi);
                    for &r in rows {
                        for (o, v) in dx[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *o += v * weights[gi];
                        }
                    }
                }
                acc(grads, *x, Tensor::matrix(n, d, dx));
            }
            Op::SliceCols(x, start) => {
                let (n, d) = self.dims(*x);
                let w = g.cols();
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + w].copy_from_slice(g.row_slice(r));
                }
                acc(grads, *x, Tensor::matrix(n, d, dx));
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.dims(p).0;
                    let slice = g.data()[offset * d..(offset + r) * d].to_vec();
                    acc(grads, p, Tensor::matrix(r, d, slice));
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let mut data = Vec::with_capacity(n * w);
                    for r in 0..n {
                        data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                    }
                    acc(grads, p, Tensor::matrix(n, w, data));
                    offset += w;
                }
            }
            Op::SoftmaxRows(x) => {
                let d = g.cols();
                let mut dx = vec![0.0; g.len()];
                for r in 0..g.rows() {
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let s = dot(y, gy);
                    for k in 0..d {
                        dx[r * d + k] = y[k] * (gy[k] - s);
                    }
                }
                acc(grads, *x, Tensor::matrix(g.rows(), d, dx));
            }
            Op::Cosine(x, p, eps) => {
                let (dx, dp) = cosine_backward(self.value(*x), self.value(*p), out, g, *eps);
                acc(grads, *x, dx);
                acc(grads, *p, dp);
            }
            Op::GroupMeanCols(x, groups) => {
                let (n, c) = self.dims(*x);
                let gw = groups.len();
                let mut dx = vec![0.0; n * c];
                for row in 0..n {
                    for (gi, cols) in groups.iter().enumerate() {
                        let v = g.data()[row * gw + gi] / cols.len() as f64;
                        for &j in cols {
                            dx[row * c + j] += v;
                        }
                    }
                }
                acc(grads, *x, Tensor::matrix(n, c, dx));
            }
            Op::GroupMaxCols(x, arg) => {
                let (n, c) = self.dims(*x);
                let gw = g.cols();
                let mut dx = vec![0.0; n * c];
                for row in 0..n {
                    for gi in 0..gw {
                        dx[row * c + arg[row * gw + gi]] += g.data()[row * gw + gi];
                    }
                }
                acc(grads, *x, Tensor::matrix(n, c, dx));
            }
            Op::ScatterCols(x, map_cols) => {
                let (n, c) = self.dims(*x);
                let w = map_cols.len();
                let mut dx = vec![0.0; n * c];
                for row in 0..n {
                    for (j, src) in map_cols.iter().enumerate() {
                        if let Some(k) = *src {
                            dx[row * c + k] += g.data()[row * w + j];
                        }
                    }
                }
                acc(grads, *x, Tensor::matrix(n, c, dx));
            }
            Op::CrossEntropy(x, labels) => {
                let (n, c) = self.dims(*x);
                let scale = g.item() / n as f64;
                let mut dx = self.value(*x).data().to_vec();
                for (r, row) in dx.chunks_mut(c).enumerate() {
                    softmax_in_place(row);
                    row[labels[r]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(grads, *x, Tensor::matrix(n, c, dx));
            }
            Op::Dice(x, labels, smooth) => {
                let (n, c) = self.dims(*x);
                let stats = dice_stats(self.value(*x), labels, c);
                let present = stats.iter().filter(|s| s.count > 0.0).count();
                let mut dx = vec![0.0; n * c];
                if present > 0 {
                    let scale = g.item() / present as f64;
                    for (t, &y) in labels.iter().enumerate() {
                        for (k, s) in stats.iter().enumerate() {
                            if s.count == 0.0 {
                                continue;
                            }
                            let num = 2.0 * s.inter + smooth;
                            let den = s.prob_sum + s.count + smooth;
                            let gt = if y == k { 1.0 } else { 0.0 };
                            dx[t * c + k] = -scale * (2.0 * gt * den - num) / (den * den);
                        }
                    }
                }
                acc(grads, *x, Tensor::matrix(n, c, dx));
            }
            Op::GaussianKl([qm, qs, pm, ps]) => {
                let gv = g.item();
                let (n, d) = self.dims(*qm);
                let (a, b, c, e) = (
                    self.value(*qm).data(),
                    self.value(*qs).data(),
                    self.value(*pm).data(),
                    self.value(*ps).data(),
                );
                let mut dqm = vec![0.0; n * d];
                let mut dqs = vec![0.0; n * d];
                let mut dpm = vec![0.0; n * d];
                let mut dps = vec![0.0; n * d];
                for k in 0..n * d {
                    let diff = a[k] - c[k];
                    let pv = e[k] * e[k];
                    dqm[k] = gv * diff / pv;
                    dpm[k] = -gv * diff / pv;
                    dqs[k] = gv * (-1.0 / b[k] + b[k] / pv);
                    dps[k] = gv * (1.0 / e[k] - (b[k] * b[k] + diff * diff) / (pv * e[k]));
                }
                acc(grads, *qm, Tensor::matrix(n, d, dqm));
                acc(grads, *qs, Tensor::matrix(n, d, dqs));
                acc(grads, *pm, Tensor::matrix(n, d, dpm));
                acc(grads, *ps, Tensor::matrix(n, d, dps));
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "constant",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulBt(..) => "matmul_bt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::ScaleBy(..) => "scale_by",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Softplus(..) => "softplus",
        Op::Exp(..) => "exp",
        Op::Square(..) => "square",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MeanRows(..) => "mean_rows",
        Op::GatherRows(..) => "gather_rows",
        Op::RowGroupSum(..) => "row_group_sum",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::Cosine(..) => "cosine",
        Op::GroupMeanCols(..) => "group_mean_cols",
        Op::GroupMaxCols(..) => "group_max_cols",
        Op::ScatterCols(..) => "scatter_cols",
        Op::CrossEntropy(..) => "cross_entropy",
        Op::Dice(..) => "dice",
        Op::GaussianKl(..) => "gaussian_kl",
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::matrix(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::matrix(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn col_sums(t: &Tensor) -> Tensor {
    let d = t.cols();
    let mut out = vec![0.0; d];
    for r in t.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    Tensor::matrix(1, d, out)
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            dot(row, row).sqrt()
        })
        .collect()
}

fn cosine_backward(x: &Tensor, p: &Tensor, out: &Tensor, g: &Tensor, eps: f64) -> (Tensor, Tensor) {
    let (n, d) = (x.rows(), x.cols());
    let r = p.rows();
    let xn = row_norms(x);
    let pn = row_norms(p);
    // a = g / D, b = g * dot / D^2 where D = |x||p| + eps and dot = cos * D.
    let mut a = vec![0.0; n * r];
    let mut x_coef = vec![0.0; n];
    let mut p_coef = vec![0.0; r];
    for t in 0..n {
        for j in 0..r {
            let k = t * r + j;
            let den = xn[t] * pn[j] + eps;
            let gv = g.data()[k];
            a[k] = gv / den;
            let b = gv * out.data()[k] / den;
            x_coef[t] += b * pn[j];
            p_coef[j] += b * xn[t];
        }
    }
    let mut dx = vec![0.0; n * d];
    matmul_acc(&a, p.data(), &mut dx, n, r, d);
    for t in 0..n {
        if xn[t] > 0.0 {
            let c = x_coef[t] / xn[t];
            for (o, v) in dx[t * d..(t + 1) * d].iter_mut().zip(x.row_slice(t)) {
                *o -= c * v;
            }
        }
    }
    let mut dp = vec![0.0; r * d];
    matmul_at_acc(&a, x.data(), &mut dp, n, r, d);
    for j in 0..r {
        if pn[j] > 0.0 {
            let c = p_coef[j] / pn[j];
            for (o, v) in dp[j * d..(j + 1) * d].iter_mut().zip(p.row_slice(j)) {
                *o -= c * v;
            }
        }
    }
    (Tensor::matrix(n, d, dx), Tensor::matrix(r, d, dp))
}

struct DiceClass {
    inter: f64,
    prob_sum: f64,
    count: f64,
}

fn dice_stats(probs: &Tensor, labels: &[usize], c: usize) -> Vec<DiceClass> {
    let mut stats: Vec<DiceClass> = (0..c)
        .map(|_| DiceClass {
            inter: 0.0,
            prob_sum: 0.0,
            count: 0.0,
        })
        .collect();
    for (row, &y) in probs.data().chunks(c).zip(labels) {
        for (k, &p) in row.iter().enumerate() {
            stats[k].prob_sum += p;
        }
        stats[y].inter += row[y];
        stats[y].count += 1.0;
    }
    stats
}

pub(crate) fn kl_term(qm: f64, qs: f64, pm: f64, ps: f64) -> f64 {
    let diff = qm - pm;
    (ps / qs).ln() + (qs * qs + diff * diff) / (2.0 * ps * ps) - 0.5
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.insert(name, t);
        s
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = store_with("p", Tensor::row(vec![0.3, -1.0, 2.0]));
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let s = g.sum(p);
        g.backward_into(s, &mut store, 1.0).unwrap();
        assert_eq!(store.grad("p").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut store = store_with("p", Tensor::row(vec![2.0, -1.0]));
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let sq = g.mul(p, p);
        let s = g.sum(sq);
        assert_eq!(g.value(s).item(), 5.0);
        g.backward_into(s, &mut store, 1.0).unwrap();
        assert_eq!(store.grad("p").unwrap().data(), &[4.0, -2.0]);
        // root value is untouched by the backward pass
        assert_eq!(g.value(s).item(), 5.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let store = store_with("p", Tensor::row(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        assert!(matches!(g.backward(p), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn nan_poisons_graph() {
        let store = store_with("p", Tensor::row(vec![1000.0]));
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let e = g.exp(p);
        let big = g.exp(e);
        let s = g.sum(big);
        assert!(matches!(g.backward(s), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn group_max_routes_to_first_maximum() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![2.0, 2.0, 1.0]));
        let m = g.group_max_cols(x, &[vec![0, 1, 2]]);
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }
}
