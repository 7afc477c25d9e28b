//! Dense tensors with a reverse-mode gradient tape.
//!
//! A [`Tensor`] is an immutable, row-major block of `f64` values. Tensors are
//! created either as plain constants or by recording a primitive on a
//! [`Tape`]. A tensor carries a node id only when it lives on a tape; a tensor
//! without a node id never receives or propagates gradient.
//!
//! Every primitive computes its forward value with a fixed, left-to-right
//! reduction order, so two identical runs produce bit-identical values and
//! gradients.
//!
//! ```
//! use sctn::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(&x, &x).unwrap();
//! let loss = tape.sum(&sq);
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&x).data(), &[2.0, 4.0, 6.0]);
//! ```

use std::sync::Arc;

use thiserror::Error;

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: row {row} has zero sum")]
    ZeroRowSum { op: &'static str, row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on a tensor that is not recorded on the tape")]
    Detached,
    #[error("gradient check: function value is not finite")]
    NonFiniteObjective,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    node: Option<NodeId>,
}

impl PartialEq for Tensor {
    /// Value equality; tape membership is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

impl Tensor {
    /// Checked constructor: length must match the shape and every value must
    /// be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self::raw(shape, data))
    }

    /// Unchecked constructor for values produced by primitives.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: data.into(),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::raw(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::raw(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![], vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// `n x 1` column.
    pub fn column(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n, 1], data)
    }

    /// `n x 3` matrix from a list of points or vectors.
    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(vec![points.len(), 3], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::raw(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same values, no tape membership.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of an `n x 3` tensor as points.
    pub fn to_points(&self) -> Vec<[f64; 3]> {
        assert_eq!(self.cols(), 3);
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    AddCol(Tensor, Tensor),
    MulCol(Tensor, Tensor),
    DivCol(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Relu(Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Sum(Tensor),
    SumRows(Tensor),
    L1NormRows(Tensor),
    L2NormRows(Tensor),
    GatherRows(Tensor, Arc<[usize]>),
    ScatterAddRows(Tensor, Arc<[usize]>),
    RowNormalize(Tensor),
    ConcatCols(Vec<Tensor>),
    SoftmaxRows(Tensor),
    LogSumExpRows(Tensor),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of primitives for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// `out[r x m] += a[r x k] * b[k x m]`, ikj order.
fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], r: usize, k: usize, m: usize) {
    for i in 0..r {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r x k] += g[r x m] * b[k x m]^T`.
fn matmul_nt_acc(out: &mut [f64], g: &[f64], b: &[f64], r: usize, k: usize, m: usize) {
    for i in 0..r {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k x m] += a[r x k]^T * g[r x m]`.
fn matmul_tn_acc(out: &mut [f64], a: &[f64], g: &[f64], r: usize, k: usize, m: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn transpose_data(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Tensor {
        self.push(Op::Leaf, t.detach())
    }

    fn push(&mut self, op: Op, mut value: Tensor) -> Tensor {
        let id = self.nodes.len();
        value.node = Some(id);
        self.nodes.push(Node {
            op,
            value: value.clone(),
        });
        value
    }

    /// Records `op` when any input is taped; otherwise returns a constant.
    fn emit(&mut self, op: Op, out: Tensor, taped: bool) -> Tensor {
        if taped {
            self.push(op, out)
        } else {
            out
        }
    }

    fn zip(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        same_shape(op, a, b)?;
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::raw(a.shape.clone(), data))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let taped = a.node.is_some() || b.node.is_some();
        Ok(self.emit(Op::Add(a.clone(), b.clone()), out, taped))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let taped = a.node.is_some() || b.node.is_some();
        Ok(self.emit(Op::Sub(a.clone(), b.clone()), out, taped))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let taped = a.node.is_some() || b.node.is_some();
        Ok(self.emit(Op::Mul(a.clone(), b.clone()), out, taped))
    }

    /// `a[n x c] + b[1 x c]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, c) = a.dims2("add_row")?;
        if b.numel() != c || b.shape.len() > 2 || (b.shape.len() == 2 && b.shape[0] != 1) {
            return Err(mismatch("add_row", a, b));
        }
        let mut data = a.data.to_vec();
        for i in 0..n {
            for (x, &y) in data[i * c..(i + 1) * c].iter_mut().zip(b.data.iter()) {
                *x += y;
            }
        }
        let taped = a.node.is_some() || b.node.is_some();
        Ok(self.emit(Op::AddRow(a.clone(), b.clone()), Tensor::raw(vec![n, c], data), taped))
    }

    fn col_operand(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
        let (n, c) = a.dims2(op)?;
        if b.shape != [n, 1] {
            return Err(mismatch(op, a, b));
        }
        Ok((n, c))
    }

    /// `a[n x c] + b[n x 1]`, broadcasting `b` over columns.
    pub fn add_col(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, c) = Self::col_operand("add_col", a, b)?;
        let mut data = a.data.to_vec();
        for i in 0..n {
            let y = b.data[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|x| *x += y);
        }
        let taped = a.node.is_some() || b.node.is_some();
        Ok(self.emit(Op::AddCol(a.clone(), b.clone()), Tensor::raw(vec![n, c], data), taped))
    }

    /// `a[n x c] * b[n x 1]`, scaling each row.
    pub fn mul_col(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, c) = Self::col_operand("mul_col", a, b)?;
        let mut data = a.data.to_vec();
        for i in 0..n {
            let y = b.data[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= y);
        }
        let taped = a.node.is_some() || b.node.is_some();
        Ok(self.emit(Op::MulCol(a.clone(), b.clone()), Tensor::raw(vec![n, c], data), taped))
    }

    /// `a[n x c] / b[n x 1]`, dividing each row.
    pub fn div_col(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, c) = Self::col_operand("div_col", a, b)?;
        let mut data = a.data.to_vec();
        for i in 0..n {
            let y = b.data[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|x| *x /= y);
        }
        let taped = a.node.is_some() || b.node.is_some();
        Ok(self.emit(Op::DivCol(a.clone(), b.clone()), Tensor::raw(vec![n, c], data), taped))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (r, k) = a.dims2("matmul")?;
        let (k2, m) = b.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", a, b));
        }
        let mut data = vec![0.0; r * m];
        matmul_acc(&mut data, &a.data, &b.data, r, k, m);
        let taped = a.node.is_some() || b.node.is_some();
        Ok(self.emit(Op::Matmul(a.clone(), b.clone()), Tensor::raw(vec![r, m], data), taped))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.dims2("transpose")?;
        let out = Tensor::raw(vec![c, r], transpose_data(&a.data, r, c));
        Ok(self.emit(Op::Transpose(a.clone()), out, a.node.is_some()))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape.clone(),
                rhs: shape,
            });
        }
        let out = Tensor {
            shape,
            data: a.data.clone(),
            node: None,
        };
        Ok(self.emit(Op::Reshape(a.clone()), out, a.node.is_some()))
    }

    fn map(&mut self, a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::raw(a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
    }

    pub fn exp(&mut self, a: &Tensor) -> Tensor {
        let out = self.map(a, f64::exp);
        self.emit(Op::Exp(a.clone()), out, a.node.is_some())
    }

    pub fn log(&mut self, a: &Tensor) -> Tensor {
        let out = self.map(a, f64::ln);
        self.emit(Op::Log(a.clone()), out, a.node.is_some())
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let out = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.emit(Op::Relu(a.clone()), out, a.node.is_some())
    }

    pub fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        let out = self.map(a, |x| x * s);
        self.emit(Op::Scale(a.clone(), s), out, a.node.is_some())
    }

    pub fn add_scalar(&mut self, a: &Tensor, s: f64) -> Tensor {
        let out = self.map(a, |x| x + s);
        self.emit(Op::AddScalar(a.clone()), out, a.node.is_some())
    }

    /// Sum of all elements, left to right.
    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let s = a.data.iter().fold(0.0, |acc, &x| acc + x);
        self.emit(Op::Sum(a.clone()), Tensor::scalar(s), a.node.is_some())
    }

    /// `n x c -> n x 1` row sums.
    pub fn sum_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (n, c) = a.dims2("sum_rows")?;
        let data = (0..n)
            .map(|i| a.data[i * c..(i + 1) * c].iter().fold(0.0, |s, &x| s + x))
            .collect();
        Ok(self.emit(Op::SumRows(a.clone()), Tensor::raw(vec![n, 1], data), a.node.is_some()))
    }

    /// `n x c -> n x 1` row L1 norms.
    pub fn l1_norm_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (n, c) = a.dims2("l1_norm_rows")?;
        let data = (0..n)
            .map(|i| a.data[i * c..(i + 1) * c].iter().fold(0.0, |s, &x| s + x.abs()))
            .collect();
        Ok(self.emit(Op::L1NormRows(a.clone()), Tensor::raw(vec![n, 1], data), a.node.is_some()))
    }

    /// `n x c -> n x 1` row L2 norms.
    pub fn l2_norm_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (n, c) = a.dims2("l2_norm_rows")?;
        let data = (0..n)
            .map(|i| {
                a.data[i * c..(i + 1) * c]
                    .iter()
                    .fold(0.0, |s, &x| s + x * x)
                    .sqrt()
            })
            .collect();
        Ok(self.emit(Op::L2NormRows(a.clone()), Tensor::raw(vec![n, 1], data), a.node.is_some()))
    }

    /// Rows `a[idx[0]], a[idx[1]], ...`.
    pub fn gather_rows(&mut self, a: &Tensor, idx: impl Into<Arc<[usize]>>) -> Result<Tensor> {
        let idx: Arc<[usize]> = idx.into();
        let (n, c) = a.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(&a.data[i * c..(i + 1) * c]);
        }
        let out = Tensor::raw(vec![idx.len(), c], data);
        Ok(self.emit(Op::GatherRows(a.clone(), idx), out, a.node.is_some()))
    }

    /// `out[idx[r]] += a[r]` into an `n_out x c` zero matrix.
    pub fn scatter_add_rows(
        &mut self,
        a: &Tensor,
        idx: impl Into<Arc<[usize]>>,
        n_out: usize,
    ) -> Result<Tensor> {
        let idx: Arc<[usize]> = idx.into();
        let (n, c) = a.dims2("scatter_add_rows")?;
        if idx.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: a.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let mut data = vec![0.0; n_out * c];
        for (r, &o) in idx.iter().enumerate() {
            if o >= n_out {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: o,
                    len: n_out,
                });
            }
            for (x, &y) in data[o * c..(o + 1) * c]
                .iter_mut()
                .zip(&a.data[r * c..(r + 1) * c])
            {
                *x += y;
            }
        }
        let out = Tensor::raw(vec![n_out, c], data);
        Ok(self.emit(Op::ScatterAddRows(a.clone(), idx), out, a.node.is_some()))
    }

    /// Divides every row by its sum.
    pub fn row_normalize(&mut self, a: &Tensor) -> Result<Tensor> {
        let (n, c) = a.dims2("row_normalize")?;
        let mut data = a.data.to_vec();
        for i in 0..n {
            let row = &mut data[i * c..(i + 1) * c];
            let s = row.iter().fold(0.0, |s, &x| s + x);
            if s == 0.0 {
                return Err(TensorError::ZeroRowSum {
                    op: "row_normalize",
                    row: i,
                });
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let out = Tensor::raw(vec![n, c], data);
        Ok(self.emit(Op::RowNormalize(a.clone()), out, a.node.is_some()))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::NotMatrix {
            op: "concat_cols",
            shape: vec![],
        })?;
        let (n, _) = first.dims2("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.dims2("concat_cols")?;
            if r != n {
                return Err(mismatch("concat_cols", first, p));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        let taped = parts.iter().any(|p| p.node.is_some());
        let out = Tensor::raw(vec![n, total], data);
        Ok(self.emit(Op::ConcatCols(parts.to_vec()), out, taped))
    }

    /// Row-wise softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (n, c) = a.dims2("softmax_rows")?;
        let mut data = a.data.to_vec();
        for i in 0..n {
            let row = &mut data[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let out = Tensor::raw(vec![n, c], data);
        Ok(self.emit(Op::SoftmaxRows(a.clone()), out, a.node.is_some()))
    }

    /// `n x c -> n x 1`, `log(sum_j exp(a_ij))` with row-max subtraction.
    pub fn logsumexp_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (n, c) = a.dims2("logsumexp_rows")?;
        let data = (0..n)
            .map(|i| {
                let row = &a.data[i * c..(i + 1) * c];
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                m + row.iter().fold(0.0, |s, &x| s + (x - m).exp()).ln()
            })
            .collect();
        let out = Tensor::raw(vec![n, 1], data);
        Ok(self.emit(Op::LogSumExpRows(a.clone()), out, a.node.is_some()))
    }

    /// Identity forward; contributes nothing to the input's gradient.
    pub fn stop_gradient(&mut self, a: &Tensor) -> Tensor {
        let out = a.detach();
        self.emit(Op::StopGradient, out, a.node.is_some())
    }

    /// Reverse pass from a scalar loss. Nodes are visited once, newest first.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar(loss.shape.clone()));
        }
        let root = loss.node.ok_or(TensorError::Detached)?;
        if root >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&node.op, &node.value, &g, &mut grads);
        }
        let shapes = self.nodes[..=root]
            .iter()
            .map(|n| n.value.shape.clone())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Adds into the gradient slot of `t` if it is taped.
fn acc(grads: &mut [Option<Vec<f64>>], t: &Tensor, f: impl FnOnce(&mut [f64])) {
    if let Some(id) = t.node {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; t.numel()]);
        f(slot);
    }
}

fn backprop(op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            acc(grads, a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            acc(grads, a, |d| {
                for ((x, gv), bv) in d.iter_mut().zip(g).zip(b.data.iter()) {
                    *x += gv * bv;
                }
            });
            acc(grads, b, |d| {
                for ((x, gv), av) in d.iter_mut().zip(g).zip(a.data.iter()) {
                    *x += gv * av;
                }
            });
        }
        Op::AddRow(a, b) => {
            acc(grads, a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            let c = b.numel();
            acc(grads, b, |d| {
                for row in g.chunks_exact(c) {
                    d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            });
        }
        Op::AddCol(a, b) => {
            acc(grads, a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            let c = a.cols();
            acc(grads, b, |d| {
                for (x, row) in d.iter_mut().zip(g.chunks_exact(c)) {
                    *x += row.iter().fold(0.0, |s, &y| s + y);
                }
            });
        }
        Op::MulCol(a, b) => {
            let c = a.cols();
            acc(grads, a, |d| {
                for ((drow, grow), &s) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(b.data.iter()) {
                    drow.iter_mut().zip(grow).for_each(|(x, y)| *x += y * s);
                }
            });
            acc(grads, b, |d| {
                for ((x, grow), arow) in d.iter_mut().zip(g.chunks_exact(c)).zip(a.data.chunks_exact(c)) {
                    *x += grow.iter().zip(arow).fold(0.0, |s, (p, q)| s + p * q);
                }
            });
        }
        Op::DivCol(a, b) => {
            let c = a.cols();
            acc(grads, a, |d| {
                for ((drow, grow), &s) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(b.data.iter()) {
                    drow.iter_mut().zip(grow).for_each(|(x, y)| *x += y / s);
                }
            });
            // d(a/b)/db = -out/b
            acc(grads, b, |d| {
                for ((x, grow), (orow, &s)) in d
                    .iter_mut()
                    .zip(g.chunks_exact(c))
                    .zip(out.data.chunks_exact(c).zip(b.data.iter()))
                {
                    *x -= grow.iter().zip(orow).fold(0.0, |acc, (p, q)| acc + p * q) / s;
                }
            });
        }
        Op::Matmul(a, b) => {
            let (r, k) = (a.rows(), a.cols());
            let m = b.cols();
            acc(grads, a, |d| matmul_nt_acc(d, g, &b.data, r, k, m));
            acc(grads, b, |d| matmul_tn_acc(d, &a.data, g, r, k, m));
        }
        Op::Transpose(a) => {
            let (r, c) = (a.rows(), a.cols());
            // g is c x r
            acc(grads, a, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Reshape(a) | Op::AddScalar(a) => {
            acc(grads, a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Exp(a) => acc(grads, a, |d| {
            for ((x, gv), ov) in d.iter_mut().zip(g).zip(out.data.iter()) {
                *x += gv * ov;
            }
        }),
        Op::Log(a) => acc(grads, a, |d| {
            for ((x, gv), av) in d.iter_mut().zip(g).zip(a.data.iter()) {
                *x += gv / av;
            }
        }),
        Op::Relu(a) => acc(grads, a, |d| {
            for ((x, gv), av) in d.iter_mut().zip(g).zip(a.data.iter()) {
                if *av > 0.0 {
                    *x += gv;
                }
            }
        }),
        Op::Scale(a, s) => acc(grads, a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y * s)),
        Op::Sum(a) => acc(grads, a, |d| d.iter_mut().for_each(|x| *x += g[0])),
        Op::SumRows(a) => {
            let c = a.cols();
            acc(grads, a, |d| {
                for (drow, gv) in d.chunks_exact_mut(c).zip(g) {
                    drow.iter_mut().for_each(|x| *x += gv);
                }
            });
        }
        Op::L1NormRows(a) => {
            let c = a.cols();
            acc(grads, a, |d| {
                for ((drow, arow), gv) in d.chunks_exact_mut(c).zip(a.data.chunks_exact(c)).zip(g) {
                    for (x, av) in drow.iter_mut().zip(arow) {
                        // sign(0) = 0
                        if *av > 0.0 {
                            *x += gv;
                        } else if *av < 0.0 {
                            *x -= gv;
                        }
                    }
                }
            });
        }
        Op::L2NormRows(a) => {
            let c = a.cols();
            acc(grads, a, |d| {
                for (((drow, arow), gv), nv) in d
                    .chunks_exact_mut(c)
                    .zip(a.data.chunks_exact(c))
                    .zip(g)
                    .zip(out.data.iter())
                {
                    if *nv > 0.0 {
                        for (x, av) in drow.iter_mut().zip(arow) {
                            *x += gv * av / nv;
                        }
                    }
                }
            });
        }
        Op::GatherRows(a, idx) => {
            let c = a.cols();
            acc(grads, a, |d| {
                for (r, &i) in idx.iter().enumerate() {
                    for (x, y) in d[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *x += y;
                    }
                }
            });
        }
        Op::ScatterAddRows(a, idx) => {
            let c = a.cols();
            acc(grads, a, |d| {
                for (r, &o) in idx.iter().enumerate() {
                    for (x, y) in d[r * c..(r + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]) {
                        *x += y;
                    }
                }
            });
        }
        Op::RowNormalize(a) => {
            // y = a / s, dy/da_k = (e_k - y) / s
            let c = a.cols();
            acc(grads, a, |d| {
                for ((drow, grow), (yrow, arow)) in d
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(out.data.chunks_exact(c).zip(a.data.chunks_exact(c)))
                {
                    let s = arow.iter().fold(0.0, |s, &x| s + x);
                    let gy = grow.iter().zip(yrow).fold(0.0, |acc, (p, q)| acc + p * q);
                    for (x, gv) in drow.iter_mut().zip(grow) {
                        *x += (gv - gy) / s;
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for p in parts {
                let c = p.cols();
                acc(grads, p, |d| {
                    for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(total)) {
                        drow.iter_mut()
                            .zip(&grow[offset..offset + c])
                            .for_each(|(x, y)| *x += y);
                    }
                });
                offset += c;
            }
        }
        Op::SoftmaxRows(a) => {
            let c = a.cols();
            acc(grads, a, |d| {
                for ((drow, grow), yrow) in d
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(out.data.chunks_exact(c))
                {
                    let gy = grow.iter().zip(yrow).fold(0.0, |acc, (p, q)| acc + p * q);
                    for ((x, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *x += yv * (gv - gy);
                    }
                }
            });
        }
        Op::LogSumExpRows(a) => {
            let c = a.cols();
            acc(grads, a, |d| {
                for (((drow, arow), gv), lv) in d
                    .chunks_exact_mut(c)
                    .zip(a.data.chunks_exact(c))
                    .zip(g)
                    .zip(out.data.iter())
                {
                    for (x, av) in drow.iter_mut().zip(arow) {
                        *x += gv * (av - lv).exp();
                    }
                }
            });
        }
        Op::StopGradient => {}
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a taped tensor, if any flowed into it.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.node?;
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::raw(self.shapes[id].clone(), g.clone()))
    }

    /// Like [`Gradients::get`] but untouched inputs yield zeros.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        self.get(t).unwrap_or_else(|| Tensor::zeros(t.shape.clone()))
    }

    pub fn by_node(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id)?.as_deref()
    }
}

/// Max relative error between analytic and central-difference gradients of
/// several inputs, `|a - n| / max(1, |a|, |n|)`.
///
/// `max_coords` caps how many coordinates per input are probed (evenly
/// strided); `None` probes all of them.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = f(&mut tape, &leaves)?;
    if !y.is_finite() {
        return Err(TensorError::NonFiniteObjective);
    }
    let grads = tape.backward(&y)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|l| grads.wrt(l)).collect();

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let v = f(&mut t, vals)?;
        if !v.is_finite() {
            return Err(TensorError::NonFiniteObjective);
        }
        Ok(v.item())
    };

    let mut worst = 0.0f64;
    for (which, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let stride = match max_coords {
            Some(cap) if cap < n => n.div_ceil(cap),
            _ => 1,
        };
        for k in (0..n).step_by(stride) {
            let mut probe = inputs.to_vec();
            let mut plus = x.data.to_vec();
            plus[k] += step;
            probe[which] = Tensor::raw(x.shape.clone(), plus);
            let fp = eval(&probe)?;
            let mut minus = x.data.to_vec();
            minus[k] -= step;
            probe[which] = Tensor::raw(x.shape.clone(), minus);
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[which].data[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`] probing every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    grad_check_many(|t, xs| f(t, &xs[0]), std::slice::from_ref(x), step, None)
}
