//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! then walks the record in reverse. Scalars are 1×1 matrices and vectors are
//! 1×n rows.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::par;

pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Mat),
    Relu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GroupMeanRows(Var, usize),
    Sum(Var),
    RowNormalize { x: Var, inv_std: Vec<f64> },
    ColNormalize { x: Var, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    DiagLogSoftmaxRows { x: Var, probs: Mat },
    BceWithLogits { x: Var, targets: Vec<f64> },
    GroupedAttention(Box<AttentionCache>),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    q_group: usize,
    kv_group: usize,
    /// Per group, per head: q_group × kv_group softmax weights.
    probs: Vec<Vec<Mat>>,
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// A forward-pass recording.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    frozen_prefixes: Vec<String>,
    buffer_updates: Vec<(String, Mat)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen_prefixes: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    /// Parameters whose path starts with `prefix` are read as constants.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen_prefixes.push(prefix.to_string());
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient but is not a stored parameter.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Reads parameter `name` from `store`; repeated reads share one leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?
            .clone();
        let frozen = self.frozen_prefixes.iter().any(|p| name.starts_with(p));
        let v = self.push(value, Op::Leaf, !frozen);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Queues a non-trainable buffer write (batch-norm running statistics).
    pub fn record_buffer_update(&mut self, name: &str, value: Mat) {
        self.buffer_updates.push((name.to_string(), value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Mat)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(dim_err("matmul", sa, sb));
        }
        let value = matmul(self.value(a).view(), self.value(b).view());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(dim_err("matmul_nt", sa, sb));
        }
        let value = matmul(self.value(a).view(), self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNT(a, b), rg))
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(dim_err("add_row", sa, sr));
        }
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` element-wise by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(dim_err("mul_row", sa, sr));
        }
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Element-wise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Result<Var> {
        if self.shape(a) != c.dim() {
            return Err(dim_err("mul_const", self.shape(a), c.dim()));
        }
        let value = self.value(a) * &c;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst(a, c), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(dim_err("concat_cols", self.shape(parts[0]), self.shape(bad)));
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("rows checked");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start + len > sa.1 {
            return Err(Error::Dimension(format!(
                "slice_cols {start}+{len} exceeds {} columns",
                sa.1
            )));
        }
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= sa.0) {
            return Err(Error::Argument(format!(
                "gather_rows: index {bad} out of range for {} rows",
                sa.0
            )));
        }
        let value = self.value(a).select(Axis(0), idx);
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Averages consecutive blocks of `group` rows.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if group == 0 || rows % group != 0 {
            return Err(Error::Dimension(format!(
                "group_mean_rows: {rows} rows not divisible into groups of {group}"
            )));
        }
        let src = self.value(a);
        let mut value = Mat::zeros((rows / group, cols));
        for (g, mut out) in value.rows_mut().into_iter().enumerate() {
            let block = src.slice(s![g * group..(g + 1) * group, ..]);
            out.assign(&block.mean_axis(Axis(0)).expect("group > 0"));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::GroupMeanRows(a, group), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row standardization (the core of layer normalization).
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(value, Op::RowNormalize { x: a, inv_std }, rg)
    }

    /// Per-column standardization with batch statistics (the core of batch
    /// normalization in training mode). Also returns the column means and
    /// biased variances.
    pub fn col_normalize(&mut self, a: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let x = self.value(a);
        let rows = x.nrows() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.ncols());
        let mut means = Vec::with_capacity(x.ncols());
        let mut vars = Vec::with_capacity(x.ncols());
        for mut col in value.columns_mut() {
            let mean = col.sum() / rows;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
            let is = 1.0 / (var + eps).sqrt();
            col.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
            means.push(mean);
            vars.push(var);
        }
        let rg = self.rg(a);
        (
            self.push(value, Op::ColNormalize { x: a, inv_std }, rg),
            means,
            vars,
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(value, Op::L2NormalizeRows { x: a, norms }, rg)
    }

    /// For a square matrix, the n×1 column of `log softmax(row i)[i]`,
    /// evaluated with max subtraction.
    pub fn diag_log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(dim_err("diag_log_softmax_rows", (r, c), (c, r)));
        }
        let x = self.value(a);
        let mut probs = x.clone();
        let mut value = Mat::zeros((r, 1));
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            value[[i, 0]] = x[[i, i]] - lse;
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::DiagLogSoftmaxRows { x: a, probs }, rg))
    }

    /// Mean binary cross-entropy of logits `a` (n×1) against 0/1 targets,
    /// in the overflow-free `max(x,0) - x*y + ln(1+e^-|x|)` form.
    pub fn bce_with_logits(&mut self, a: Var, targets: &[f64]) -> Result<Var> {
        let sa = self.shape(a);
        if sa != (targets.len(), 1) {
            return Err(dim_err("bce_with_logits", sa, (targets.len(), 1)));
        }
        let x = self.value(a);
        let n = targets.len() as f64;
        let total: f64 = x
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let value = Mat::from_elem((1, 1), total / n);
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                x: a,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Scaled dot-product attention evaluated independently per group and
    /// head. `q` holds `groups * q_group` rows, `k` and `v` hold
    /// `groups * kv_group` rows; columns are split into `heads` equal slices
    /// and head outputs are written back to their own column slice.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_group: usize,
        kv_group: usize,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sk != sv || sq.1 != sk.1 {
            return Err(dim_err("grouped_attention", sq, sk));
        }
        if heads == 0 || sq.1 % heads != 0 {
            return Err(Error::Dimension(format!(
                "model width {} not divisible by {heads} heads",
                sq.1
            )));
        }
        if q_group == 0 || kv_group == 0 || sq.0 % q_group != 0 || sk.0 % kv_group != 0 {
            return Err(Error::Dimension("attention group sizes do not tile rows".into()));
        }
        let groups = sq.0 / q_group;
        if sk.0 / kv_group != groups {
            return Err(Error::Dimension(format!(
                "{groups} query groups vs {} key groups",
                sk.0 / kv_group
            )));
        }
        let d = sq.1;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let per_group: Vec<(Mat, Vec<Mat>)> = par::map_indexed(groups, |g| {
            let qg = qm.slice(s![g * q_group..(g + 1) * q_group, ..]);
            let kg = km.slice(s![g * kv_group..(g + 1) * kv_group, ..]);
            let vg = vm.slice(s![g * kv_group..(g + 1) * kv_group, ..]);
            let mut out = Mat::zeros((q_group, d));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = qg.slice(cols).dot(&kg.slice(cols).t()) * scale;
                for mut row in scores.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
                    row.mapv_inplace(|x| (x - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|x| x / z);
                }
                out.slice_mut(cols).assign(&scores.dot(&vg.slice(cols)));
                probs.push(scores);
            }
            (out, probs)
        });
        let mut value = Mat::zeros((sq.0, d));
        let mut probs = Vec::with_capacity(groups);
        for (g, (out, p)) in per_group.into_iter().enumerate() {
            value
                .slice_mut(s![g * q_group..(g + 1) * q_group, ..])
                .assign(&out);
            probs.push(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::GroupedAttention(Box::new(AttentionCache {
                q,
                k,
                v,
                heads,
                q_group,
                kv_group,
                probs,
            })),
            rg,
        ))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, delta: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, matmul(g.view(), self.value(*b).t()), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, matmul(self.value(*a).t(), g.view()), &mut grads);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.rg(*a) {
                        acc(*a, matmul(g.view(), self.value(*b).view()), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, matmul(g.t(), self.value(*a).view()), &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::MulRow(a, row) => {
                    if self.rg(*row) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(*row, d, &mut grads);
                    }
                    if self.rg(*a) {
                        acc(*a, &g * self.value(*row), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone(), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g, &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, &g * self.value(*b), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, &g * self.value(*a), &mut grads);
                    }
                }
                Op::Scale(a, f) => acc(*a, g * *f, &mut grads),
                Op::AddScalar(a) => acc(*a, g, &mut grads),
                Op::MulConst(a, c) => acc(*a, g * c, &mut grads),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(*a, d, &mut grads);
                }
                Op::Exp(a) => acc(*a, g * &node.value, &mut grads),
                Op::Clamp(a, lo, hi) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = 0.0
                        }
                    });
                    acc(*a, d, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned(), &mut grads),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(p, g.slice(s![.., start..start + w]).to_owned(), &mut grads);
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    if self.rg(*a) {
                        let mut d = Mat::zeros(self.shape(*a));
                        let w = g.ncols();
                        d.slice_mut(s![.., *start..*start + w]).assign(&g);
                        acc(*a, d, &mut grads);
                    }
                }
                Op::GatherRows(a, idx_list) => {
                    if self.rg(*a) {
                        let mut d = Mat::zeros(self.shape(*a));
                        for (r, &src) in idx_list.iter().enumerate() {
                            let mut dst = d.row_mut(src);
                            dst += &g.row(r);
                        }
                        acc(*a, d, &mut grads);
                    }
                }
                Op::GroupMeanRows(a, group) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    let inv = 1.0 / *group as f64;
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        row.assign(&(&g.row(r / group) * inv));
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let d = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(*a, d, &mut grads);
                }
                Op::RowNormalize { x, inv_std } => {
                    let xhat = &node.value;
                    let cols = xhat.ncols() as f64;
                    let mut d = g;
                    for ((mut drow, xrow), &is) in
                        d.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let mean_g = drow.sum() / cols;
                        let mean_gx = drow.dot(&xrow) / cols;
                        Zip::from(&mut drow)
                            .and(&xrow)
                            .for_each(|dv, &xv| *dv = is * (*dv - mean_g - xv * mean_gx));
                    }
                    acc(*x, d, &mut grads);
                }
                Op::ColNormalize { x, inv_std } => {
                    let xhat = &node.value;
                    let rows = xhat.nrows() as f64;
                    let mut d = g;
                    for ((mut dcol, xcol), &is) in
                        d.columns_mut().into_iter().zip(xhat.columns()).zip(inv_std)
                    {
                        let mean_g = dcol.sum() / rows;
                        let mean_gx = dcol.dot(&xcol) / rows;
                        Zip::from(&mut dcol)
                            .and(&xcol)
                            .for_each(|dv, &xv| *dv = is * (*dv - mean_g - xv * mean_gx));
                    }
                    acc(*x, d, &mut grads);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut d = g;
                    for ((mut drow, yrow), &n) in d.rows_mut().into_iter().zip(y.rows()).zip(norms)
                    {
                        let proj = drow.dot(&yrow);
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|dv, &yv| *dv = (*dv - yv * proj) / n);
                    }
                    acc(*x, d, &mut grads);
                }
                Op::DiagLogSoftmaxRows { x, probs } => {
                    let mut d = probs.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        let gi = g[[i, 0]];
                        row.mapv_inplace(|p| -gi * p);
                        row[i] += gi;
                    }
                    acc(*x, d, &mut grads);
                }
                Op::BceWithLogits { x, targets } => {
                    let n = targets.len() as f64;
                    let scale = g[[0, 0]] / n;
                    let mut d = self.value(*x).clone();
                    for (dv, &y) in d.iter_mut().zip(targets) {
                        *dv = (sigmoid(*dv) - y) * scale;
                    }
                    acc(*x, d, &mut grads);
                }
                Op::GroupedAttention(cache) => {
                    let (dq, dk, dv) = self.attention_backward(cache, &g);
                    acc(cache.q, dq, &mut grads);
                    acc(cache.k, dk, &mut grads);
                    acc(cache.v, dv, &mut grads);
                }
            }
        }

        let mut param_grads = BTreeMap::new();
        for (name, v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                param_grads.insert(name.clone(), g.as_standard_layout().into_owned());
            }
        }
        Ok(Gradients {
            params: param_grads,
            leaves: grads,
        })
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Mat) -> (Mat, Mat, Mat) {
        let (qm, km, vm) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qm.ncols();
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = qm.nrows() / c.q_group;
        let blocks: Vec<(Mat, Mat, Mat)> = par::map_indexed(groups, |gi| {
            let qr = s![gi * c.q_group..(gi + 1) * c.q_group, ..];
            let kr = s![gi * c.kv_group..(gi + 1) * c.kv_group, ..];
            let (qg, kg, vg, go) = (qm.slice(qr), km.slice(kr), vm.slice(kr), g.slice(qr));
            let mut dq = Mat::zeros((c.q_group, d));
            let mut dk = Mat::zeros((c.kv_group, d));
            let mut dv = Mat::zeros((c.kv_group, d));
            for h in 0..c.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let p = &c.probs[gi][h];
                let go_h = go.slice(cols);
                dv.slice_mut(cols).assign(&p.t().dot(&go_h));
                let dp = go_h.dot(&vg.slice(cols).t());
                let mut ds = p * &dp;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let inner = row.sum();
                    Zip::from(&mut row)
                        .and(&prow)
                        .for_each(|x, &pv| *x = (*x - pv * inner) * scale);
                }
                dq.slice_mut(cols).assign(&ds.dot(&kg.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&qg.slice(cols)));
            }
            (dq, dk, dv)
        });
        let mut dq = Mat::zeros(qm.dim());
        let mut dk = Mat::zeros(km.dim());
        let mut dv = Mat::zeros(vm.dim());
        for (gi, (bq, bk, bv)) in blocks.into_iter().enumerate() {
            dq.slice_mut(s![gi * c.q_group..(gi + 1) * c.q_group, ..])
                .assign(&bq);
            dk.slice_mut(s![gi * c.kv_group..(gi + 1) * c.kv_group, ..])
                .assign(&bk);
            dv.slice_mut(s![gi * c.kv_group..(gi + 1) * c.kv_group, ..])
                .assign(&bv);
        }
        (dq, dk, dv)
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    pub params: BTreeMap<String, Mat>,
    leaves: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of a non-parameter leaf created with [`Tape::input`].
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dense product. Large left operands are split into row blocks that run in
/// parallel; each output row is computed by the same kernel either way.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Mat {
    const BLOCK: usize = 64;
    let m = a.nrows();
    if !par::parallel_enabled() || m < 2 * BLOCK {
        return a.dot(&b);
    }
    let n_blocks = m.div_ceil(BLOCK);
    let parts = par::map_indexed(n_blocks, |i| {
        let end = ((i + 1) * BLOCK).min(m);
        a.slice(s![i * BLOCK..end, ..]).dot(&b)
    });
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("column counts agree")
}
