//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value. Inputs always
//! precede outputs on the tape, so a reverse sweep in index order is a valid
//! topological traversal. Parameters enter the tape once per graph (leaf nodes
//! are cached by [`ParamId`]), and their gradients are summed back into the
//! [`ParamStore`] after [`Graph::backward`].

use std::collections::HashMap;

use crate::error::{FgaError, Result};
use crate::math::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    ScaleConst(Var, f64),
    AddColBroadcast(Var, Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    NormalizeCols { x: Var, denom: Vec<f64>, clamped: Vec<bool> },
    SumRows(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ConcatFlat(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SliceFlat(Var, usize),
    GatherCols(Vec<(Var, usize)>),
    RepeatCols(Var),
    Embed { table: Var, ids: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, pooled: bool },
    NegLog(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    /// Single-element value, e.g. a loss.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(FgaError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf. Gradients are tracked but never flushed anywhere.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Input)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.value(id).clone(), Op::Param)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (dims(ta), dims(tb));
        if k != k2 {
            return Err(FgaError::shape("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(m, n, out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        self.push("transpose", t, Op::Transpose(a))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (dims(self.value(a)), dims(self.value(b)));
        if da != db {
            return Err(FgaError::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let mut t = self.value(a).clone();
        for (x, y) in t.data_mut().iter_mut().zip(self.value(b).data()) {
            *x += y;
        }
        self.push("add", t, Op::Add(a, b))
    }

    /// Sum of equally shaped terms, accumulated left to right.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = *terms
            .first()
            .ok_or_else(|| FgaError::shape("add_n", "no terms"))?;
        let mut t = self.value(first).clone();
        for &v in &terms[1..] {
            self.same_dims("add_n", first, v)?;
            for (x, y) in t.data_mut().iter_mut().zip(self.value(v).data()) {
                *x += y;
            }
        }
        self.push("add_n", t, Op::AddN(terms.to_vec()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let mut t = self.value(a).clone();
        for (x, y) in t.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.push("mul", t, Op::Mul(a, b))
    }

    /// `s * a` for a single-element `s`.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(FgaError::shape("scale_by", "scale must have one element"));
        }
        let k = self.scalar(s);
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= k);
        self.push("scale_by", t, Op::ScaleBy(s, a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= k);
        self.push("scale", t, Op::ScaleConst(a, k))
    }

    /// Adds column vector `b` (length rows) to every column of `a`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        if self.value(b).len() != r {
            return Err(FgaError::shape(
                "add_col",
                format!("{r}x{c} + vector of {}", self.value(b).len()),
            ));
        }
        let mut t = self.value(a).clone();
        let bias = self.value(b).data().to_vec();
        for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
            row.iter_mut().for_each(|x| *x += bias[i]);
        }
        self.push("add_col", t, Op::AddColBroadcast(a, b))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(a).len() {
            return Err(FgaError::shape("mul_const", "factor length mismatch"));
        }
        let mut t = self.value(a).clone();
        for (x, f) in t.data_mut().iter_mut().zip(&factors) {
            *x *= f;
        }
        self.push("mul_const", t, Op::MulConst(a, factors))
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = f(*x));
        self.push(name, t, op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax over all elements, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = softmax_tensor(self.value(a))?;
        self.push("softmax", t, Op::Softmax(a))
    }

    /// Divides each column by `max(norm, eps)`.
    pub fn normalize_cols(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(FgaError::InvalidArgument("normalize epsilon must be positive".into()));
        }
        let src = self.value(a);
        let (r, c) = dims(src);
        let mut out = src.clone();
        let mut denom = vec![0.0; c];
        let mut clamped = vec![false; c];
        for j in 0..c {
            let norm = (0..r).map(|i| src.get(i, j).powi(2)).sum::<f64>().sqrt();
            clamped[j] = norm < eps;
            denom[j] = norm.max(eps);
            for i in 0..r {
                out.set(i, j, src.get(i, j) / denom[j]);
            }
        }
        self.push("normalize_cols", out, Op::NormalizeCols { x: a, denom, clamped })
    }

    /// Row sums of a matrix, as a rank-1 vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        let data = self.value(a).data().chunks(c).map(|row| row.iter().sum()).collect();
        let t = Tensor::new(vec![r], data)?;
        self.push("sum_rows", t, Op::SumRows(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        self.push("reshape", t, Op::Reshape(a))
    }

    /// Vertical stack; all parts need the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(*parts.first().ok_or_else(|| FgaError::shape("concat_rows", "empty"))?).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(FgaError::shape("concat_rows", "column count differs"));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push("concat_rows", Tensor::from_parts(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Horizontal stack; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(*parts.first().ok_or_else(|| FgaError::shape("concat_cols", "empty"))?).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(FgaError::shape("concat_cols", "row count differs"));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..rows {
                data[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.push("concat_cols", Tensor::from_parts(rows, total, data), Op::ConcatCols(parts.to_vec()))
    }

    /// Flattens every part (row-major) and concatenates into a `1 x total` row.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Result<Var> {
        let data: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let n = data.len();
        let t = Tensor::new(vec![1, n], data)?;
        self.push("concat_flat", t, Op::ConcatFlat(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        if start + len > r || len == 0 {
            return Err(FgaError::shape("slice_rows", format!("{start}+{len} of {r}")));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor::from_parts(len, c, data), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        if start + len > c || len == 0 {
            return Err(FgaError::shape("slice_cols", format!("{start}+{len} of {c}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push("slice_cols", Tensor::from_parts(r, len, data), Op::SliceCols(a, start))
    }

    /// Takes `shape.product()` consecutive elements of the flattened `a`.
    pub fn slice_flat(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(a).data();
        if offset + n > src.len() {
            return Err(FgaError::shape("slice_flat", "range out of bounds"));
        }
        let t = Tensor::new(shape.to_vec(), src[offset..offset + n].to_vec())?;
        self.push("slice_flat", t, Op::SliceFlat(a, offset))
    }

    /// Builds a matrix whose k-th column is column `col` of `var` for the k-th pair.
    pub fn gather_cols(&mut self, cols: &[(Var, usize)]) -> Result<Var> {
        let rows = self.value(cols.first().ok_or_else(|| FgaError::shape("gather_cols", "empty"))?.0).rows();
        let k = cols.len();
        let mut data = vec![0.0; rows * k];
        for (j, &(v, c)) in cols.iter().enumerate() {
            let t = self.value(v);
            if t.rows() != rows || c >= t.cols() {
                return Err(FgaError::shape("gather_cols", "column out of range"));
            }
            for i in 0..rows {
                data[i * k + j] = t.get(i, c);
            }
        }
        self.push("gather_cols", Tensor::from_parts(rows, k, data), Op::GatherCols(cols.to_vec()))
    }

    /// Repeats a column vector `n` times side by side.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.cols() != 1 || n == 0 {
            return Err(FgaError::shape("repeat_cols", "expects a column vector"));
        }
        let data = t.data().iter().flat_map(|&x| std::iter::repeat(x).take(n)).collect();
        let r = t.rows();
        self.push("repeat_cols", Tensor::from_parts(r, n, data), Op::RepeatCols(a))
    }

    /// Column `u` of the output is row `ids[u]` of `table`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = dims(t);
        if ids.is_empty() {
            return Err(FgaError::shape("embed", "empty id list"));
        }
        let n = ids.len();
        let mut data = vec![0.0; d * n];
        for (u, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(FgaError::OutOfVocabulary { id, size: v });
            }
            for k in 0..d {
                data[k * n + u] = t.get(id, k);
            }
        }
        self.push("embed", Tensor::from_parts(d, n, data), Op::Embed { table, ids: ids.to_vec() })
    }

    /// Row-wise batch normalization of `x` (channels x pool) using the pool's
    /// own population statistics. Returns the output and per-channel (mean, var).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.value(x);
        let (c, n) = dims(t);
        if n < 2 {
            return Err(FgaError::shape("batch_norm", "training pool needs at least 2 elements"));
        }
        self.check_affine(gamma, beta, c)?;
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        for ch in 0..c {
            let row = &t.data()[ch * n..(ch + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            means[ch] = mean;
            vars[ch] = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        }
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalize_affine(x, gamma, beta, &means, &inv_std, true)?;
        Ok((out, means, vars))
    }

    /// Row-wise batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        means: &[f64],
        vars: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.value(x).rows();
        self.check_affine(gamma, beta, c)?;
        if means.len() != c || vars.len() != c {
            return Err(FgaError::shape("batch_norm", "running statistics length mismatch"));
        }
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize_affine(x, gamma, beta, means, &inv_std, false)
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(FgaError::shape("batch_norm", format!("affine params must have {c} entries")));
        }
        Ok(())
    }

    fn normalize_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        means: &[f64],
        inv_std: &[f64],
        pooled: bool,
    ) -> Result<Var> {
        let t = self.value(x);
        let (c, n) = dims(t);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; c * n];
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for k in 0..n {
                let idx = ch * n + k;
                xhat[idx] = (t.data()[idx] - means[ch]) * inv_std[ch];
                out[idx] = g[ch] * xhat[idx] + b[ch];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std: inv_std.to_vec(),
            pooled,
        };
        self.push("batch_norm", value, op)
    }

    /// `-ln(a[index])`.
    pub fn neg_log(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.len() {
            return Err(FgaError::InvalidArgument(format!(
                "index {index} out of range for {} entries",
                t.len()
            )));
        }
        let v = -t.data()[index].ln();
        self.push("neg_log", Tensor::scalar(v), Op::NegLog(a, index))
    }

    /// Reverse sweep from a single-element node. Replaces any previous gradients.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).len() != 1 {
            return Err(FgaError::shape("backward", "target must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[target.0] = Some(vec![1.0]);
        for idx in (0..=target.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of parameter leaves into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.accumulate_grad(id, g);
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), n) = (dims(ta), tb.cols());
                // dA = G * B^T, dB = A^T * G
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gij * tb.data()[p * n + j];
                        }
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = ta.data()[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Transpose(a) => {
                let (r, c) = dims(out);
                let gt = Tensor::from_parts(r, c, g.to_vec()).transpose();
                acc(grads, *a, gt.data());
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::AddN(terms) => {
                for t in terms {
                    acc(grads, *t, g);
                }
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::ScaleBy(s, a) => {
                let k = self.scalar(*s);
                let ds: f64 = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).sum();
                let da: Vec<f64> = g.iter().map(|g| g * k).collect();
                acc(grads, *s, &[ds]);
                acc(grads, *a, &da);
            }
            Op::ScaleConst(a, k) => {
                let da: Vec<f64> = g.iter().map(|g| g * k).collect();
                acc(grads, *a, &da);
            }
            Op::AddColBroadcast(a, b) => {
                let c = out.cols();
                let db: Vec<f64> = g.chunks(c).map(|row| row.iter().sum()).collect();
                acc(grads, *a, g);
                acc(grads, *b, &db);
            }
            Op::MulConst(a, f) => {
                let da: Vec<f64> = g.iter().zip(f).map(|(g, f)| g * f).collect();
                acc(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(grads, *a, &da);
            }
            Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(out.data()).map(|(g, y)| g * y).sum();
                let da: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| y * (g - dot)).collect();
                acc(grads, *a, &da);
            }
            Op::NormalizeCols { x, denom, clamped } => {
                let (r, c) = dims(out);
                let y = out.data();
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    if clamped[j] {
                        for i in 0..r {
                            da[i * c + j] = g[i * c + j] / denom[j];
                        }
                    } else {
                        let dot: f64 = (0..r).map(|i| y[i * c + j] * g[i * c + j]).sum();
                        for i in 0..r {
                            da[i * c + j] = (g[i * c + j] - y[i * c + j] * dot) / denom[j];
                        }
                    }
                }
                acc(grads, *x, &da);
            }
            Op::SumRows(a) => {
                let c = self.value(*a).cols();
                let da: Vec<f64> = g.iter().flat_map(|&gi| std::iter::repeat(gi).take(c)).collect();
                acc(grads, *a, &da);
            }
            Op::Reshape(a) => acc(grads, *a, g),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(grads, *p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let (r, c) = dims(self.value(*p));
                    let mut dp = Vec::with_capacity(r * c);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                    }
                    acc(grads, *p, &dp);
                    offset += c;
                }
            }
            Op::ConcatFlat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(grads, *p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                acc_range(grads, *a, self.value(*a).len(), start * c, g);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = dims(self.value(*a));
                let len = out.cols();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(grads, *a, &da);
            }
            Op::SliceFlat(a, offset) => {
                acc_range(grads, *a, self.value(*a).len(), *offset, g);
            }
            Op::GatherCols(cols) => {
                let (r, k) = dims(out);
                for (j, &(v, c)) in cols.iter().enumerate() {
                    let src_cols = self.value(v).cols();
                    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                    for i in 0..r {
                        slot[i * src_cols + c] += g[i * k + j];
                    }
                }
            }
            Op::RepeatCols(a) => {
                let c = out.cols();
                let da: Vec<f64> = g.chunks(c).map(|row| row.iter().sum()).collect();
                acc(grads, *a, &da);
            }
            Op::Embed { table, ids } => {
                let d = self.value(*table).cols();
                let n = ids.len();
                let slot = grads[table.0].get_or_insert_with(|| vec![0.0; self.nodes[table.0].value.len()]);
                for (u, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        slot[id * d + k] += g[k * n + u];
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, pooled } => {
                let (c, n) = dims(out);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; c * n];
                for ch in 0..c {
                    let row = ch * n..(ch + 1) * n;
                    let (gs, xs) = (&g[row.clone()], &xhat[row]);
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let k = gam[ch] * inv_std[ch];
                    for t in 0..n {
                        dx[ch * n + t] = if *pooled {
                            k * (gs[t] - sum_g / n as f64 - xs[t] * sum_gx / n as f64)
                        } else {
                            k * gs[t]
                        };
                    }
                }
                acc(grads, *x, &dx);
                acc(grads, *gamma, &dgamma);
                acc(grads, *beta, &dbeta);
            }
            Op::NegLog(a, index) => {
                let t = self.value(*a);
                let mut da = vec![0.0; t.len()];
                da[*index] = -g[0] / t.data()[*index];
                acc(grads, *a, &da);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn acc_range(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, offset: usize, g: &[f64]) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    slot[offset..offset + g.len()]
        .iter_mut()
        .zip(g)
        .for_each(|(a, b)| *a += b);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over every element of `t`.
pub fn softmax_tensor(t: &Tensor) -> Result<Tensor> {
    if !t.is_finite() {
        return Err(FgaError::NonFinite { op: "softmax" });
    }
    let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = t.data().iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Tensor::new(t.shape().to_vec(), exps.into_iter().map(|e| e / z).collect())
}
