//! Dense 64-bit tensors with a reverse-mode tape.
//!
//! Every primitive application is appended to a [`Tape`]; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients into each node that
//! requires them. Tensors are at most rank 2 in practice: matrices are
//! `[rows, cols]` and reductions yield rank-0 scalars.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::simplex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    Detached,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![x],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    left: vec![rows.len(), cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    /// A single column `[n, 1]`.
    pub fn column(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.cols() != other.rows() {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Scalar map with zero derivative, used for piecewise-constant gates.
pub type ConstMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Constant row-compressed matrix, used as the left factor of
/// [`Op::SparseMatMul`]. Column indices are ascending within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists; each list is sorted.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                if c >= cols || !v.is_finite() {
                    return Err(TensorError::Domain {
                        op: "sparse_matrix",
                        detail: format!("entry ({}, {c}) = {v} out of range", offsets.len() - 1),
                    });
                }
                indices.push(c);
                values.push(v);
            }
            offsets.push(indices.len());
        }
        Ok(Self {
            rows: offsets.len() - 1,
            cols,
            offsets,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                t.data[r * self.cols + c] = v;
            }
        }
        t
    }

    fn check(&self, op: &'static str, x: &Tensor, inner: usize) -> Result<()> {
        if x.shape.len() != 2 || x.rows() != inner {
            return Err(TensorError::Shape {
                op,
                left: vec![self.rows, self.cols],
                right: x.shape.clone(),
            });
        }
        Ok(())
    }

    /// `self · x`
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        self.check("sparse_matmul", x, self.cols)?;
        let c = x.cols();
        let mut out = Tensor::zeros(self.rows, c);
        for r in 0..self.rows {
            let dst = &mut out.data[r * c..(r + 1) * c];
            for (k, v) in self.row(r) {
                for (d, s) in dst.iter_mut().zip(x.row(k)) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · x`
    pub fn transpose_matmul(&self, x: &Tensor) -> Result<Tensor> {
        self.check("sparse_transpose_matmul", x, self.rows)?;
        let c = x.cols();
        let mut out = Tensor::zeros(self.cols, c);
        for r in 0..self.rows {
            for (k, v) in self.row(r) {
                for j in 0..c {
                    out.data[k * c + j] += v * x.data[r * c + j];
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone)]
pub enum Op {
    Leaf,
    MatMul,
    Add,
    /// `[r, c] + [1, c]`, the row broadcast used for biases.
    AddRow,
    Sub,
    Mul,
    /// `[r, c] ∘ [r, 1]`, scaling each row by a per-row weight.
    MulCol,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    SoftmaxRows,
    /// Natural log of the argument clamped to `[CLAMP_FLOOR, 1]`.
    Log,
    RowSum,
    Sum,
    Mean,
    MinScalar(f64),
    ConcatCols,
    VarianceRows,
    NegEntropyRows,
    ConstMap(ConstMap),
    /// Constant sparse matrix times the input.
    SparseMatMul(Arc<SparseMatrix>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MulCol => "mul_col",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::SoftmaxRows => "softmax_rows",
            Op::Log => "log",
            Op::RowSum => "row_sum",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MinScalar(_) => "min_scalar",
            Op::ConcatCols => "concat_cols",
            Op::VarianceRows => "variance_rows",
            Op::NegEntropyRows => "neg_entropy_rows",
            Op::ConstMap(_) => "const_map",
            Op::SparseMatMul(_) => "sparse_matmul",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::MatMul | Op::Add | Op::AddRow | Op::Sub | Op::Mul | Op::MulCol | Op::ConcatCols => 2,
            _ => 1,
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::Shape {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

fn need_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if a.shape.len() != 2 {
        return Err(TensorError::Shape {
            op,
            left: a.shape.clone(),
            right: vec![],
        });
    }
    Ok(())
}

/// Forward kernel for one primitive.
pub fn apply_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    debug_assert_eq!(inputs.len(), op.arity());
    let name = op.name();
    for t in inputs {
        if !t.is_finite() {
            return Err(TensorError::Domain {
                op: name,
                detail: "non-finite input".into(),
            });
        }
    }
    let out = match op {
        Op::Leaf => unreachable!("leaves are not applied"),
        Op::MatMul => inputs[0].matmul(inputs[1])?,
        Op::Add => {
            same_shape(name, inputs[0], inputs[1])?;
            inputs[0].zip_map(inputs[1], |a, b| a + b)
        }
        Op::Sub => {
            same_shape(name, inputs[0], inputs[1])?;
            inputs[0].zip_map(inputs[1], |a, b| a - b)
        }
        Op::Mul => {
            same_shape(name, inputs[0], inputs[1])?;
            inputs[0].zip_map(inputs[1], |a, b| a * b)
        }
        Op::AddRow => {
            let (a, b) = (inputs[0], inputs[1]);
            need_matrix(name, a)?;
            if b.rows() != 1 || b.cols() != a.cols() || b.shape.len() != 2 {
                return Err(TensorError::Shape {
                    op: name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let c = a.cols();
            let mut out = a.clone();
            for (i, x) in out.data.iter_mut().enumerate() {
                *x += b.data[i % c];
            }
            out
        }
        Op::MulCol => {
            let (a, b) = (inputs[0], inputs[1]);
            need_matrix(name, a)?;
            if b.shape.len() != 2 || b.cols() != 1 || b.rows() != a.rows() {
                return Err(TensorError::Shape {
                    op: name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let c = a.cols();
            let mut out = a.clone();
            for (i, x) in out.data.iter_mut().enumerate() {
                *x *= b.data[i / c];
            }
            out
        }
        Op::Scale(k) => inputs[0].map(|x| k * x),
        Op::AddScalar(k) => inputs[0].map(|x| x + k),
        Op::Relu => inputs[0].map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Sigmoid => inputs[0].map(sigmoid),
        Op::SoftmaxRows => {
            let a = inputs[0];
            need_matrix(name, a)?;
            let mut out = a.clone();
            let c = a.cols();
            for r in 0..a.rows() {
                softmax_in_place(&mut out.data[r * c..(r + 1) * c]);
            }
            out
        }
        Op::Log => inputs[0].map(simplex::clamped_ln),
        Op::RowSum => {
            let a = inputs[0];
            need_matrix(name, a)?;
            Tensor::column((0..a.rows()).map(|r| a.row(r).iter().sum()).collect())
        }
        Op::Sum => Tensor::scalar(inputs[0].data.iter().sum()),
        Op::Mean => {
            let a = inputs[0];
            if a.is_empty() {
                return Err(TensorError::Domain {
                    op: name,
                    detail: "mean of an empty tensor".into(),
                });
            }
            Tensor::scalar(a.data.iter().sum::<f64>() / a.len() as f64)
        }
        Op::MinScalar(k) => inputs[0].map(|x| x.min(*k)),
        Op::ConcatCols => {
            let (a, b) = (inputs[0], inputs[1]);
            need_matrix(name, a)?;
            need_matrix(name, b)?;
            if a.rows() != b.rows() {
                return Err(TensorError::Shape {
                    op: name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (ca, cb) = (a.cols(), b.cols());
            let mut data = Vec::with_capacity(a.rows() * (ca + cb));
            for r in 0..a.rows() {
                data.extend_from_slice(a.row(r));
                data.extend_from_slice(b.row(r));
            }
            Tensor::matrix(a.rows(), ca + cb, data)?
        }
        Op::VarianceRows | Op::NegEntropyRows => {
            let a = inputs[0];
            need_matrix(name, a)?;
            let f = if matches!(op, Op::VarianceRows) {
                simplex::variance
            } else {
                simplex::neg_entropy
            };
            Tensor::column((0..a.rows()).map(|r| f(a.row(r))).collect())
        }
        Op::ConstMap(f) => inputs[0].map(|x| f(x)),
        Op::SparseMatMul(m) => m.matmul(inputs[0])?,
    };
    Ok(out)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// One entry of the tape record, exposed for inspection.
#[derive(Debug, Clone)]
pub struct TapeEntry {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Ordered record of primitive applications.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(v.idx)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Registers an input tensor. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::Domain {
                op: "leaf",
                detail: "non-finite input".into(),
            });
        }
        Ok(self.push(Op::Leaf, vec![], value, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.idx).and_then(|n| n.grad.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Applies a primitive and records it.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        if idx.len() != op.arity() {
            return Err(TensorError::Domain {
                op: op.name(),
                detail: format!("expected {} inputs, got {}", op.arity(), idx.len()),
            });
        }
        let value = {
            let refs: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
            apply_op(&op, &refs)?
        };
        let rg = !matches!(op, Op::ConstMap(_)) && idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(op, idx, value, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(Op::AddRow, &[a, bias])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.apply(Op::MulCol, &[a, col])
    }
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Op::Scale(k), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Op::AddScalar(k), &[a])
    }
    /// `1 − a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SoftmaxRows, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::RowSum, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn min_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Op::MinScalar(k), &[a])
    }
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::ConcatCols, &[a, b])
    }
    pub fn variance_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::VarianceRows, &[a])
    }
    pub fn neg_entropy_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::NegEntropyRows, &[a])
    }
    pub fn const_map(&mut self, a: Var, f: ConstMap) -> Result<Var> {
        self.apply(Op::ConstMap(f), &[a])
    }

    pub fn sparse_matmul(&mut self, m: Arc<SparseMatrix>, a: Var) -> Result<Var> {
        self.apply(Op::SparseMatMul(m), &[a])
    }

    /// The record of applied primitives in application order.
    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(n.op, Op::Leaf))
            .map(|(i, n)| TapeEntry {
                op: n.op.name(),
                inputs: n.inputs.clone(),
                output: i,
            })
            .collect()
    }

    /// Recomputes every recorded output from the stored leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let v = match n.op {
                Op::Leaf => n.value.clone(),
                _ => {
                    let refs: Vec<&Tensor> = n.inputs.iter().map(|&i| &values[i]).collect();
                    apply_op(&n.op, &refs)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Populates gradients of every node that requires them with the
    /// derivative of the scalar `output`.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = self.check(output)?;
        if self.nodes[out].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[out].value.shape.clone()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut seed = self.nodes[out].value.clone();
        seed.data[0] = 1.0;
        self.nodes[out].grad = Some(seed);

        for i in (0..=out).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (input, contrib) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut self.nodes[input].grad {
                    Some(acc) => {
                        for (a, c) in acc.data.iter_mut().zip(&contrib.data) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let x = |k: usize| &self.nodes[ins[k]].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::ConstMap(_) => vec![],
            Op::MatMul => {
                let da = g.matmul(&x(1).transpose()).expect("matmul grad shape");
                let db = x(0).transpose().matmul(g).expect("matmul grad shape");
                vec![(ins[0], da), (ins[1], db)]
            }
            Op::Add => vec![(ins[0], g.clone()), (ins[1], g.clone())],
            Op::Sub => vec![(ins[0], g.clone()), (ins[1], g.map(|v| -v))],
            Op::Mul => vec![
                (ins[0], g.zip_map(x(1), |a, b| a * b)),
                (ins[1], g.zip_map(x(0), |a, b| a * b)),
            ],
            Op::AddRow => {
                let c = g.cols();
                let mut db = vec![0.0; c];
                for (k, v) in g.data.iter().enumerate() {
                    db[k % c] += v;
                }
                vec![(ins[0], g.clone()), (ins[1], Tensor::matrix(1, c, db).unwrap())]
            }
            Op::MulCol => {
                let (a, b) = (x(0), x(1));
                let c = a.cols();
                let mut da = g.clone();
                let mut db = vec![0.0; a.rows()];
                for k in 0..g.len() {
                    da.data[k] *= b.data[k / c];
                    db[k / c] += g.data[k] * a.data[k];
                }
                vec![(ins[0], da), (ins[1], Tensor::column(db))]
            }
            Op::Scale(k) => vec![(ins[0], g.map(|v| k * v))],
            Op::SparseMatMul(m) => vec![(ins[0], m.transpose_matmul(g).expect("sparse grad shape"))],
            Op::AddScalar(_) => vec![(ins[0], g.clone())],
            Op::Relu => vec![(ins[0], g.zip_map(x(0), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Sigmoid => vec![(ins[0], g.zip_map(y, |gv, s| gv * s * (1.0 - s)))],
            Op::SoftmaxRows => {
                let c = y.cols();
                let mut dz = g.clone();
                for r in 0..y.rows() {
                    let s = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dz.data[r * c + j] = s[j] * (gr[j] - dot);
                    }
                }
                vec![(ins[0], dz)]
            }
            Op::Log => vec![(
                ins[0],
                g.zip_map(x(0), |gv, xv| {
                    if (simplex::CLAMP_FLOOR..=1.0).contains(&xv) {
                        gv / xv
                    } else {
                        0.0
                    }
                }),
            )],
            Op::RowSum => {
                let a = x(0);
                let c = a.cols();
                let mut da = a.clone();
                for (k, v) in da.data.iter_mut().enumerate() {
                    *v = g.data[k / c];
                }
                vec![(ins[0], da)]
            }
            Op::Sum => {
                let gv = g.data[0];
                vec![(ins[0], x(0).map(|_| gv))]
            }
            Op::Mean => {
                let a = x(0);
                let gv = g.data[0] / a.len() as f64;
                vec![(ins[0], a.map(|_| gv))]
            }
            Op::MinScalar(k) => vec![(ins[0], g.zip_map(x(0), |gv, xv| if xv < *k { gv } else { 0.0 }))],
            Op::ConcatCols => {
                let (a, b) = (x(0), x(1));
                let (ca, cb) = (a.cols(), b.cols());
                let mut da = Vec::with_capacity(a.len());
                let mut db = Vec::with_capacity(b.len());
                for r in 0..g.rows() {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..ca + cb]);
                }
                vec![
                    (ins[0], Tensor::matrix(a.rows(), ca, da).unwrap()),
                    (ins[1], Tensor::matrix(b.rows(), cb, db).unwrap()),
                ]
            }
            Op::VarianceRows | Op::NegEntropyRows => {
                let a = x(0);
                let c = a.cols();
                let mut da = a.clone();
                let f = if matches!(node.op, Op::VarianceRows) {
                    simplex::variance_grad
                } else {
                    simplex::neg_entropy_grad
                };
                for r in 0..a.rows() {
                    let row = &mut da.data[r * c..(r + 1) * c];
                    f(a.row(r), row);
                    for v in row.iter_mut() {
                        *v *= g.data[r];
                    }
                }
                vec![(ins[0], da)]
            }
        }
    }
}

/// Maximum over all input coordinates of
/// `|analytic − central difference| / max(1, |analytic|)`.
///
/// `expr` builds a scalar from the supplied leaves on a fresh tape; it is
/// called once for the analytic gradient and twice per coordinate.
pub fn check_gradient<F>(expr: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(TensorError::Domain {
            op: "check_gradient",
            detail: format!("step {h} outside (0, 1e-3]"),
        });
    }
    let eval = |values: &[Tensor], grad: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone(), grad))
            .collect::<Result<_>>()?;
        let out = expr(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !grad {
            return Ok((value, vec![]));
        }
        if tape.value(out).len() != 1 {
            return Err(TensorError::NotScalar(tape.value(out).shape().to_vec()));
        }
        if tape.requires_grad(out) {
            tape.backward(out)?;
        }
        Ok((value, vars.iter().map(|&v| tape.grad(v).cloned()).collect()))
    };

    let (_, grads) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (idx, g) in grads.iter().enumerate() {
        for k in 0..inputs[idx].len() {
            let analytic = g.as_ref().map_or(0.0, |g| g.data[k]);
            let orig = probe[idx].data[k];
            probe[idx].data[k] = orig + h;
            let (fp, _) = eval(&probe, false)?;
            probe[idx].data[k] = orig - h;
            let (fm, _) = eval(&probe, false)?;
            probe[idx].data[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_selects_first_column() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 2, &[1., 2., 3., 4.])).unwrap();
        let b = t.constant(m(2, 1, &[1., 0.])).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1., 3.]);
        assert_eq!(t.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn sparse_product_matches_dense() {
        let sp = SparseMatrix::from_rows(3, vec![vec![(2, 1.0), (0, 0.25)], vec![(1, -2.0)]]).unwrap();
        let x = m(3, 2, &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(sp.matmul(&x).unwrap(), sp.to_dense().matmul(&x).unwrap());
        let g = m(2, 2, &[1., -1., 0.5, 2.]);
        assert_eq!(
            sp.transpose_matmul(&g).unwrap(),
            sp.to_dense().transpose().matmul(&g).unwrap()
        );
        assert!(matches!(sp.matmul(&m(2, 2, &[0.; 4])), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_of_zeros_is_half() {
        let mut t = Tape::new();
        let a = t.constant(m(1, 2, &[0., 0.])).unwrap();
        let s = t.softmax_rows(a).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut t = Tape::new();
        let a = t.constant(m(1, 3, &[-1., 2., 0.])).unwrap();
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r).data(), &[0., 2., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3)).unwrap();
        let b = t.constant(Tensor::zeros(2, 3)).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn non_finite_leaf_is_a_domain_error() {
        let mut t = Tape::new();
        let err = t.leaf(m(1, 1, &[f64::NAN]), true).unwrap_err();
        assert!(matches!(err, TensorError::Domain { .. }));
    }

    #[test]
    fn derivative_of_square() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_first_component_gradient() {
        // Frozen from a central difference with h = 1e-6 on z = [0, 0]:
        // (0.24999999995, -0.25000000003).
        let mut t = Tape::new();
        let z = t.param(m(1, 2, &[0., 0.])).unwrap();
        let s = t.softmax_rows(z).unwrap();
        let pick = t.constant(m(1, 2, &[1., 0.])).unwrap();
        let p0 = t.mul(s, pick).unwrap();
        let out = t.sum(p0).unwrap();
        t.backward(out).unwrap();
        let g = t.grad(z).unwrap().data().to_vec();
        assert!((g[0] - 0.24999999995167776).abs() < 1e-9);
        assert!((g[1] + 0.2500000000349445).abs() < 1e-9);
    }

    #[test]
    fn derivative_of_negative_log() {
        let mut t = Tape::new();
        let p = t.param(Tensor::scalar(0.5)).unwrap();
        let l = t.log(p).unwrap();
        let nl = t.scale(l, -1.0).unwrap();
        t.backward(nl).unwrap();
        assert_eq!(t.grad(p).unwrap().data(), &[-2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(2, 2)).unwrap();
        let r = t.relu(a).unwrap();
        assert!(matches!(t.backward(r), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.param(Tensor::scalar(1.0)).unwrap();
        let _ = t2.param(Tensor::scalar(1.0)).unwrap();
        assert_eq!(t2.backward(x), Err(TensorError::Detached));
    }

    #[test]
    fn gradient_of_quadratic_form() {
        let a = m(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x = m(2, 1, &[0.3, -1.2]);
        let err = check_gradient(
            |t, v| {
                let a = t.constant(a.clone())?;
                let ax = t.matmul(a, v[0])?;
                let xax = t.mul(v[0], ax)?;
                t.sum(xax)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn gradient_of_constant_is_zero_error() {
        let err = check_gradient(|t, _| t.constant(Tensor::scalar(4.0)), &[m(1, 2, &[1.0, 2.0])], 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn check_gradient_rejects_large_step() {
        assert!(check_gradient(|t, v| t.sum(v[0]), &[Tensor::scalar(1.0)], 0.1).is_err());
    }

    #[test]
    fn tape_is_topologically_ordered_and_replays_bit_identically() {
        let mut t = Tape::new();
        let a = t.param(m(2, 2, &[0.1, -0.4, 0.7, 0.2])).unwrap();
        let b = t.param(m(1, 2, &[0.3, -0.1])).unwrap();
        let h = t.add_row(a, b).unwrap();
        let s = t.softmax_rows(h).unwrap();
        let l = t.log(s).unwrap();
        let out = t.mean(l).unwrap();
        for e in t.entries() {
            assert!(e.inputs.iter().all(|&i| i < e.output));
        }
        let replay = t.replay().unwrap();
        assert_eq!(replay[out.index()].data(), t.value(out).data());
        for (i, r) in replay.iter().enumerate() {
            assert_eq!(r.data(), t.nodes[i].value.data());
        }
    }

    type Builder = fn(&mut Tape, &[Var]) -> Result<Var>;

    fn unary_cases() -> Vec<(&'static str, Builder)> {
        vec![
            ("relu", |t, v| {
                let r = t.relu(v[0])?;
                let w = t.mul(r, v[0])?;
                t.sum(w)
            }),
            ("sigmoid", |t, v| {
                let r = t.sigmoid(v[0])?;
                let w = t.mul(r, v[0])?;
                t.sum(w)
            }),
            ("softmax", |t, v| {
                let s = t.softmax_rows(v[0])?;
                let w = t.mul(s, v[0])?;
                t.sum(w)
            }),
            ("log", |t, v| {
                let s = t.softmax_rows(v[0])?;
                let l = t.log(s)?;
                t.mean(l)
            }),
            ("row_sum", |t, v| {
                let r = t.row_sum(v[0])?;
                let w = t.mul(r, r)?;
                t.sum(w)
            }),
            ("scale_add", |t, v| {
                let s = t.scale(v[0], -1.7)?;
                let a = t.add_scalar(s, 0.3)?;
                let w = t.mul(a, a)?;
                t.mean(w)
            }),
            ("min_scalar", |t, v| {
                let s = t.min_scalar(v[0], 0.5)?;
                let w = t.mul(s, v[0])?;
                t.sum(w)
            }),
            ("concat", |t, v| {
                let c = t.concat_cols(v[0], v[0])?;
                let w = t.mul(c, c)?;
                t.sum(w)
            }),
            ("variance", |t, v| {
                let s = t.softmax_rows(v[0])?;
                let d = t.variance_rows(s)?;
                let w = t.mul(d, d)?;
                t.sum(w)
            }),
            ("sparse_matmul", |t, v| {
                let sp = SparseMatrix::from_rows(2, vec![vec![(1, 0.5), (0, -1.5)], vec![], vec![(1, 2.0)]])?;
                let y = t.sparse_matmul(Arc::new(sp), v[0])?;
                let w = t.mul(y, y)?;
                t.sum(w)
            }),
            ("neg_entropy", |t, v| {
                let s = t.softmax_rows(v[0])?;
                let d = t.neg_entropy_rows(s)?;
                t.sum(d)
            }),
        ]
    }

    fn binary_cases() -> Vec<(&'static str, Builder)> {
        vec![
            ("matmul", |t, v| {
                let bt = t.scale(v[1], 0.5)?;
                let b = t.constant(Tensor::filled(2, 2, 0.5))?;
                let lhs = t.matmul(b, v[0])?;
                let m1 = t.mul(lhs, bt)?;
                let s = t.softmax_rows(m1)?;
                let w = t.mul(s, s)?;
                t.sum(w)
            }),
            ("add_sub_mul", |t, v| {
                let a = t.add(v[0], v[1])?;
                let s = t.sub(v[0], v[1])?;
                let m1 = t.mul(a, s)?;
                t.sum(m1)
            }),
            ("add_row_mul_col", |t, v| {
                let bias = t.constant(Tensor::matrix(1, 3, vec![0.1, -0.2, 0.3]).unwrap())?;
                let a = t.add_row(v[0], bias)?;
                let col = t.row_sum(v[1])?;
                let m1 = t.mul_col(a, col)?;
                let w = t.mul(m1, m1)?;
                t.sum(w)
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn primitive_gradients_match_central_differences(
            a in proptest::collection::vec(-2.0f64..2.0, 6),
            b in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            // Keep clear of the relu and min_scalar kinks.
            prop_assume!(a.iter().chain(&b).all(|x| x.abs() > 1e-3 && (x - 0.5).abs() > 1e-3));
            let ta = m(2, 3, &a);
            let tb = m(2, 3, &b);
            for (name, f) in unary_cases() {
                let err = check_gradient(f, std::slice::from_ref(&ta), 1e-5).unwrap();
                prop_assert!(err < 1e-4, "{name}: {err}");
            }
            for (name, f) in binary_cases() {
                let err = check_gradient(f, &[ta.clone(), tb.clone()], 1e-5).unwrap();
                prop_assert!(err < 1e-4, "{name}: {err}");
            }
        }

        #[test]
        fn softmax_rows_are_distributions(a in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut t = Tape::new();
            let x = t.constant(m(3, 4, &a)).unwrap();
            let s = t.softmax_rows(x).unwrap();
            let v = t.value(s);
            for r in 0..3 {
                prop_assert!(v.row(r).iter().all(|&p| p >= 0.0));
                prop_assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn forward_is_deterministic(a in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let run = || {
                let mut t = Tape::new();
                let x = t.constant(m(2, 3, &a)).unwrap();
                let w = t.constant(m(3, 2, &[0.3, -0.2, 0.9, 0.1, -0.5, 0.4])).unwrap();
                let h = t.matmul(x, w).unwrap();
                let s = t.softmax_rows(h).unwrap();
                t.value(s).clone()
            };
            prop_assert_eq!(run().data().to_vec(), run().data().to_vec());
        }
    }
}
