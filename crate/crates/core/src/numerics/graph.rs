//! Eager reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates immediately
//! and records how to route gradients to its inputs. Because nodes are only
//! ever appended after their parents, walking the tape backwards is a valid
//! reverse topological order and each node is visited exactly once.

use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::sinkhorn::{log_sinkhorn, log_sinkhorn_backward, logsumexp, SinkhornTrace};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddBroadcastScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Transpose(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    SignedSquare(Var),
    Recip(Var),
    Cos(Var),
    Sin(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LogSumExpCols(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    GatherRows(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    PairSwap(Var),
    RepeatPairs(Var),
    ClampRowNorm(Var, f64),
    Standardize(Var, bool, f64),
    Lookup(Var, usize, Vec<usize>),
    DustbinAugment(Var, Var),
    Sinkhorn(Var, Box<SinkhornTrace>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to the leaf `v`, or `None` when `v`
    /// does not influence the root. Only leaves retain their gradients.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::invalid(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.0, a.1, b.0, b.1
    ))
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

    /// Total bytes held by node values on the tape.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * 8).sum()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf. Repeated calls with the same name return the
    /// same node so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.variable(value.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    /// Makes `var` the node returned by later `param(name, ..)` calls. Lets
    /// gradient checks substitute their own leaves for named weights.
    pub fn alias_param(&mut self, name: &str, var: Var) {
        self.params.insert(name.to_string(), var);
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let out = va.matmul_unchecked(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("matmul_nt", va.shape(), vb.shape()));
        }
        let out = va.matmul_nt(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    // ----- elementwise binary ----------------------------------------------

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(shape_err("add_row", sa, sr));
        }
        let r = self.value(row).as_slice().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..sa.0 {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Adds a `rows x 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(shape_err("add_col", sa, sc));
        }
        let c = self.value(col).as_slice().to_vec();
        let mut out = self.value(a).clone();
        for (i, ci) in c.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|o| *o += ci);
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(out, Op::AddCol(a, col), rg))
    }

    /// Multiplies column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(shape_err("mul_row", sa, sr));
        }
        let r = self.value(row).as_slice().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..sa.0 {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(shape_err("mul_col", sa, sc));
        }
        let c = self.value(col).as_slice().to_vec();
        let mut out = self.value(a).clone();
        for (i, ci) in c.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|o| *o *= ci);
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    /// Adds a `1 x 1` node to every entry of `a`.
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(shape_err("add_scalar_var", self.shape(a), self.shape(s)));
        }
        let sv = self.scalar(s);
        let out = self.value(a).map(|x| x + sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::AddBroadcastScalar(a, s), rg))
    }

    // ----- elementwise unary -----------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::Shift(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `x * |x|`, a monotone, sign-preserving square.
    pub fn signed_square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x.abs(), Op::SignedSquare(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    // ----- reductions -------------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        for i in 0..v.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise log-sum-exp as a `rows x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows())
            .map(|i| logsumexp(v.row(i).iter().copied()))
            .collect();
        let out = Matrix::from_vec(v.rows(), 1, data).expect("shape");
        let rg = self.rg(a);
        self.push(out, Op::LogSumExpRows(a), rg)
    }

    /// Column-wise log-sum-exp as a `1 x cols` row.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = v.transpose();
        let data = (0..t.rows())
            .map(|j| logsumexp(t.row(j).iter().copied()))
            .collect();
        let out = Matrix::from_vec(1, v.cols(), data).expect("shape");
        let rg = self.rg(a);
        self.push(out, Op::LogSumExpCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns: `rows x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::from_vec(v.rows(), 1, v.row_sums()).expect("shape");
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    /// Sum down rows: `1 x cols`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::from_vec(1, v.cols(), v.col_sums()).expect("shape");
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    // ----- indexing and layout ---------------------------------------------

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let rows = self.shape(a).0;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let out = self.value(a).select_rows(indices);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Builds a `rows x cols` matrix whose entry `k` (row-major) is
    /// `table[indices[k], col]`.
    pub fn lookup(
        &mut self,
        table: Var,
        col: usize,
        indices: &[usize],
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let t = self.value(table);
        if indices.len() != rows * cols || col >= t.cols() {
            return Err(Error::invalid("lookup: index layout does not match output shape"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::invalid(format!("lookup: index {bad} out of range")));
        }
        let data = indices.iter().map(|&i| t.get(i, col)).collect();
        let out = Matrix::from_vec(rows, cols, data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Lookup(table, col, indices.to_vec()), rg))
    }

    /// Column-wise max over each group of input rows. Empty groups yield zeros.
    pub fn segment_max(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let v = self.value(a);
        let cols = v.cols();
        let mut out = Matrix::zeros(groups.len(), cols);
        let mut arg = vec![usize::MAX; groups.len() * cols];
        for (s, group) in groups.iter().enumerate() {
            for &r in group {
                if r >= v.rows() {
                    return Err(Error::invalid(format!(
                        "segment_max: row {r} out of range for {} rows",
                        v.rows()
                    )));
                }
                let row = v.row(r);
                for c in 0..cols {
                    let k = s * cols + c;
                    if arg[k] == usize::MAX || row[c] > out.get(s, c) {
                        arg[k] = r;
                        out.set(s, c, row[c]);
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentMax(a, arg), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::invalid("concat_cols: no inputs"))?;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(shape_err("concat_cols", (rows, 0), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for i in 0..rows {
                out.row_mut(i)[offset..offset + c].copy_from_slice(v.row(i));
            }
            offset += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > rows {
            return Err(Error::invalid(format!(
                "slice_rows: {start}+{len} exceeds {rows} rows"
            )));
        }
        let v = self.value(a);
        let out = Matrix::from_vec(
            len,
            cols,
            v.as_slice()[start * cols..(start + len) * cols].to_vec(),
        )?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(Error::invalid(format!(
                "slice_cols: {start}+{len} exceeds {cols} cols"
            )));
        }
        let v = self.value(a);
        let out = Matrix::from_fn(rows, len, |i, j| v.get(i, start + j));
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Maps each column pair `(x1, x2)` to `(-x2, x1)`.
    pub fn pair_swap(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if cols % 2 != 0 {
            return Err(Error::invalid("pair_swap: odd column count"));
        }
        let v = self.value(a);
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let src = v.row(i);
            let dst = out.row_mut(i);
            for k in (0..cols).step_by(2) {
                dst[k] = -src[k + 1];
                dst[k + 1] = src[k];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::PairSwap(a), rg))
    }

    /// Duplicates every column: `[a, b] -> [a, a, b, b]`.
    pub fn repeat_pairs(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let v = self.value(a);
        let out = Matrix::from_fn(rows, cols * 2, |i, j| v.get(i, j / 2));
        let rg = self.rg(a);
        self.push(out, Op::RepeatPairs(a), rg)
    }

    /// Rescales each row whose Euclidean norm exceeds `radius` onto the sphere
    /// of that radius; shorter rows pass through.
    pub fn clamp_row_norm(&mut self, a: Var, radius: f64) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > radius {
                row.iter_mut().for_each(|x| *x *= radius / n);
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::ClampRowNorm(a, radius), rg)
    }

    /// Shifts and scales every row to zero mean and unit variance
    /// (`eps` added to the variance).
    pub fn standardize_rows(&mut self, a: Var, eps: f64) -> Var {
        self.standardize(a, false, eps)
    }

    /// Column-wise counterpart of [`Graph::standardize_rows`]: statistics run
    /// over the rows of each column.
    pub fn standardize_cols(&mut self, a: Var, eps: f64) -> Var {
        self.standardize(a, true, eps)
    }

    fn standardize(&mut self, a: Var, by_cols: bool, eps: f64) -> Var {
        let v = self.value(a);
        let t = if by_cols { v.transpose() } else { v.clone() };
        let mut out = t.clone();
        for i in 0..out.rows() {
            standardize_slice(out.row_mut(i), eps);
        }
        let out = if by_cols { out.transpose() } else { out };
        let rg = self.rg(a);
        self.push(out, Op::Standardize(a, by_cols, eps), rg)
    }

    /// Appends a row and a column filled with the `1 x 1` node `alpha`.
    pub fn dustbin_augment(&mut self, scores: Var, alpha: Var) -> Result<Var> {
        if self.shape(alpha) != (1, 1) {
            return Err(Error::invalid("dustbin_augment: alpha must be 1x1"));
        }
        let a = self.scalar(alpha);
        let s = self.value(scores);
        let (m, n) = s.shape();
        let out = Matrix::from_fn(m + 1, n + 1, |i, j| {
            if i < m && j < n {
                s.get(i, j)
            } else {
                a
            }
        });
        let rg = self.rg(scores) || self.rg(alpha);
        Ok(self.push(out, Op::DustbinAugment(scores, alpha), rg))
    }

    /// Log-domain Sinkhorn over the log-kernel `scores` with the given
    /// log-marginals; returns `log Z`.
    pub fn log_sinkhorn(
        &mut self,
        scores: Var,
        log_mu: &[f64],
        log_nu: &[f64],
        iters: usize,
    ) -> Result<Var> {
        let (rows, cols) = self.shape(scores);
        if log_mu.len() != rows || log_nu.len() != cols {
            return Err(Error::invalid("log_sinkhorn: marginal lengths mismatch"));
        }
        let (out, trace) = log_sinkhorn(self.value(scores), log_mu, log_nu, iters);
        let rg = self.rg(scores);
        Ok(self.push(out, Op::Sinkhorn(scores, Box::new(trace)), rg))
    }

    // ----- composite helpers ------------------------------------------------

    /// Divides each row by its L2 norm (plus `eps` under the root).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let sq = self.square(a);
        let s = self.sum_rows(sq);
        let s = self.add_scalar(s, eps);
        let n = self.sqrt(s);
        let inv = self.recip(n);
        self.mul_col(a, inv)
    }

    // ----- reverse pass -----------------------------------------------------

    /// Back-propagates from the scalar `root` and returns all gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::invalid("backward: root must be a 1x1 scalar"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        let mut out: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                out[i] = Some(g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul_nt(val(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul_unchecked(val(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.matmul_tn(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*r) {
                    let cs = g.col_sums();
                    self.acc(grads, *r, Matrix::from_vec(1, cs.len(), cs).expect("shape"));
                }
            }
            Op::AddCol(a, c) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*c) {
                    let rs = g.row_sums();
                    self.acc(grads, *c, Matrix::from_vec(rs.len(), 1, rs).expect("shape"));
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(*a), val(*r));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for k in 0..ga.rows() {
                        for (x, s) in ga.row_mut(k).iter_mut().zip(rv.as_slice()) {
                            *x *= s;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.rg(*r) {
                    let gr = g.zip_map(av, |x, y| x * y).col_sums();
                    self.acc(grads, *r, Matrix::from_vec(1, gr.len(), gr).expect("shape"));
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (val(*a), val(*c));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for (k, s) in cv.as_slice().iter().enumerate() {
                        ga.row_mut(k).iter_mut().for_each(|x| *x *= s);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.rg(*c) {
                    let gc = g.zip_map(av, |x, y| x * y).row_sums();
                    self.acc(grads, *c, Matrix::from_vec(gc.len(), 1, gc).expect("shape"));
                }
            }
            Op::AddBroadcastScalar(a, s) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *s, Matrix::scalar(g.sum()));
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::Shift(a) => self.acc(grads, *a, g.clone()),
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                self.acc(
                    grads,
                    *a,
                    g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { s * gi }),
                );
            }
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(y, |gi, yi| gi * yi)),
            Op::Log(a) => self.acc(grads, *a, g.zip_map(val(*a), |gi, x| gi / x)),
            Op::Sqrt(a) => self.acc(grads, *a, g.zip_map(y, |gi, yi| gi * 0.5 / yi)),
            Op::Square(a) => self.acc(grads, *a, g.zip_map(val(*a), |gi, x| 2.0 * gi * x)),
            Op::SignedSquare(a) => {
                self.acc(grads, *a, g.zip_map(val(*a), |gi, x| 2.0 * gi * x.abs()))
            }
            Op::Recip(a) => self.acc(grads, *a, g.zip_map(y, |gi, yi| -gi * yi * yi)),
            Op::Cos(a) => self.acc(grads, *a, g.zip_map(val(*a), |gi, x| -gi * x.sin())),
            Op::Sin(a) => self.acc(grads, *a, g.zip_map(val(*a), |gi, x| gi * x.cos())),
            Op::Softplus(a) => self.acc(grads, *a, g.zip_map(val(*a), |gi, x| gi * sigmoid(x))),
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for k in 0..y.rows() {
                    let (yr, gr) = (y.row(k), g.row(k));
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yi, gi)) in ga.row_mut(k).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yi * (gi - inner);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSumExpRows(a) => {
                let av = val(*a);
                let ga = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
                    g.get(r, 0) * (av.get(r, c) - y.get(r, 0)).exp()
                });
                self.acc(grads, *a, ga);
            }
            Op::LogSumExpCols(a) => {
                let av = val(*a);
                let ga = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
                    g.get(0, c) * (av.get(r, c) - y.get(0, c)).exp()
                });
                self.acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                self.acc(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                self.acc(grads, *a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                self.acc(grads, *a, Matrix::from_fn(r, c, |_, j| g.get(0, j)));
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (o, gi) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += gi;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SegmentMax(a, arg) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &src) in arg.iter().enumerate() {
                    if src != usize::MAX {
                        let col = k % c;
                        let v = ga.get(src, col) + g.as_slice()[k];
                        ga.set(src, col, v);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if self.rg(p) {
                        let gp = Matrix::from_fn(r, c, |i, j| g.get(i, offset + j));
                        self.acc(grads, p, gp);
                    }
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                ga.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                self.acc(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                self.acc(grads, *a, ga);
            }
            Op::PairSwap(a) => {
                let (r, c) = g.shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let src = g.row(i);
                    let dst = ga.row_mut(i);
                    for k in (0..c).step_by(2) {
                        dst[k] = src[k + 1];
                        dst[k + 1] = -src[k];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::RepeatPairs(a) => {
                let (r, c) = val(*a).shape();
                let ga = Matrix::from_fn(r, c, |i, j| g.get(i, 2 * j) + g.get(i, 2 * j + 1));
                self.acc(grads, *a, ga);
            }
            Op::ClampRowNorm(a, radius) => {
                let av = val(*a);
                let mut ga = g.clone();
                for k in 0..av.rows() {
                    let x = av.row(k);
                    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > *radius {
                        let gr = g.row(k);
                        let xg: f64 = x.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let s = radius / n;
                        for (o, (xi, gi)) in ga.row_mut(k).iter_mut().zip(x.iter().zip(gr)) {
                            *o = s * (gi - xi * xg / (n * n));
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Standardize(a, by_cols, eps) => {
                let (x, gy) = if *by_cols { (val(*a).transpose(), g.transpose()) } else { (val(*a).clone(), g.clone()) };
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                let n = x.cols() as f64;
                for i in 0..x.rows() {
                    let mut y = x.row(i).to_vec();
                    let inv_sd = standardize_slice(&mut y, *eps);
                    let gr = gy.row(i);
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gi), yi) in gx.row_mut(i).iter_mut().zip(gr).zip(&y) {
                        *o = inv_sd * (gi - mg - yi * mgy);
                    }
                }
                let gx = if *by_cols { gx.transpose() } else { gx };
                self.acc(grads, *a, gx);
            }
            Op::Lookup(t, col, idx) => {
                let (r, c) = val(*t).shape();
                let mut gt = Matrix::zeros(r, c);
                for (&i, gi) in idx.iter().zip(g.as_slice()) {
                    let v = gt.get(i, *col) + gi;
                    gt.set(i, *col, v);
                }
                self.acc(grads, *t, gt);
            }
            Op::DustbinAugment(s, alpha) => {
                let (m, n) = val(*s).shape();
                if self.rg(*s) {
                    let gs = Matrix::from_fn(m, n, |i, j| g.get(i, j));
                    self.acc(grads, *s, gs);
                }
                if self.rg(*alpha) {
                    let mut total = 0.0;
                    for i in 0..=m {
                        for j in 0..=n {
                            if i == m || j == n {
                                total += g.get(i, j);
                            }
                        }
                    }
                    self.acc(grads, *alpha, Matrix::scalar(total));
                }
            }
            Op::Sinkhorn(s, trace) => {
                let gs = log_sinkhorn_backward(val(*s), trace, g);
                self.acc(grads, *s, gs);
            }
        }
    }
    /// Gradients of every named parameter, keyed by name in sorted order.
    /// Gradients of every named parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.params
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Standardizes `x` in place; returns `1 / sqrt(var + eps)`.
pub(crate) fn standardize_slice(x: &mut [f64], eps: f64) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_sd = 1.0 / (var + eps).sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) * inv_sd);
    inv_sd
}
