//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Values are
//! addressed through [`DiffValue`] handles, which are plain indices into the
//! tape. Because the tape is append-only, node indices are already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use skelsynth::diffcore::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::from_row_slice(1, 3, &[1.0, -2.0, 3.0]));
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).as_slice(), &[2.0, -4.0, 6.0]);
//! ```

use nalgebra::DMatrix;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;

/// Negative slope used by leaky-relu unless configured otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("domain error in {op} at ({row}, {col}): value {value}")]
    Domain {
        op: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("row {row} has no unmasked entries (isolated node)")]
    IsolatedNode { row: usize },
    #[error("backward requires a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiffValue(usize);

impl DiffValue {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a custom operation: maps the output gradient
/// to one gradient per input, in input order.
pub type Vjp = Box<dyn Fn(&Matrix) -> Vec<Matrix> + Send + Sync>;

/// Elementwise unary operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Sigmoid,
    LeakyRelu(f64),
    Exp,
    Log,
    Square,
    Abs,
}

/// Elementwise binary operations; both operands must share a shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Scale(usize, f64),
    Transpose(usize),
    RowSoftmaxMasked(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Slice { src: usize, row0: usize, col0: usize },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Trace(usize),
    FrobeniusSq(usize),
    L2Norm(usize),
    RowNorms(usize),
    GatherRows(usize, Vec<usize>),
    Scatter(usize, Vec<(usize, usize)>),
    SegmentMax { src: usize, argmax: Vec<usize> },
    Diag(usize),
    BroadcastRows(usize),
    BroadcastScalar(usize),
    MulScalar(usize, usize),
    Clamp(usize, f64, f64),
    Custom(Vec<usize>, Vjp),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::LeakyRelu(_), _) => "leaky_relu",
            Op::Unary(Unary::Exp, _) => "exp",
            Op::Unary(Unary::Log, _) => "log",
            Op::Unary(Unary::Square, _) => "square",
            Op::Unary(Unary::Abs, _) => "abs",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
            Op::RowSoftmaxMasked(_) => "rowsoftmax_masked",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Trace(_) => "trace",
            Op::FrobeniusSq(_) => "frobenius_sq",
            Op::L2Norm(_) => "l2_norm",
            Op::RowNorms(_) => "row_norms",
            Op::GatherRows(..) => "gather_rows",
            Op::Scatter(..) => "scatter",
            Op::SegmentMax { .. } => "segment_max",
            Op::Diag(_) => "diag",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::BroadcastScalar(_) => "broadcast_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Clamp(..) => "clamp",
            Op::Custom(..) => "custom",
        }
    }
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Matrix, op: Op) -> DiffValue {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::MulScalar(a, b) => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::ConcatRows(v) | Op::ConcatCols(v) | Op::Custom(v, _) => {
                v.iter().any(|&i| self.nodes[i].requires_grad)
            }
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::RowSoftmaxMasked(a)
            | Op::Slice { src: a, .. }
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Trace(a)
            | Op::FrobeniusSq(a)
            | Op::L2Norm(a)
            | Op::RowNorms(a)
            | Op::GatherRows(a, _)
            | Op::Scatter(a, _)
            | Op::SegmentMax { src: a, .. }
            | Op::Diag(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastScalar(a)
            | Op::Clamp(a, ..) => self.nodes[*a].requires_grad,
        };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        DiffValue(self.nodes.len() - 1)
    }

    /// Trainable input; its gradient is retained by [`Tape::backward`].
    pub fn leaf(&mut self, value: Matrix) -> DiffValue {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> DiffValue {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, x: f64) -> DiffValue {
        self.constant(Matrix::from_element(1, 1, x))
    }

    pub fn value(&self, v: DiffValue) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: DiffValue) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn shape(&self, v: DiffValue) -> (usize, usize) {
        shape(&self.nodes[v.0].value)
    }

    pub fn op_tag(&self, v: DiffValue) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn requires_grad(&self, v: DiffValue) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros when nothing has reached it.
    pub fn grad(&self, v: DiffValue) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.nrows(), node.value.ncols()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(DiffError::Dimension {
                op: "matmul",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let out = va * vb;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn binary(&mut self, op: Binary, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let (va, vb) = (self.value(a), self.value(b));
        if shape(va) != shape(vb) {
            let name = match op {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(DiffError::Dimension {
                op: name,
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let out = match op {
            Binary::Add => va + vb,
            Binary::Sub => va - vb,
            Binary::Mul => va.component_mul(vb),
        };
        Ok(self.push(out, Op::Binary(op, a.0, b.0)))
    }

    pub fn add(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary, x: DiffValue) -> Result<DiffValue> {
        let v = self.value(x);
        let out = match op {
            Unary::Sigmoid => v.map(sigmoid),
            Unary::LeakyRelu(s) => v.map(|t| if t > 0.0 { t } else { s * t }),
            Unary::Exp => v.map(f64::exp),
            Unary::Log => {
                for c in 0..v.ncols() {
                    for r in 0..v.nrows() {
                        let t = v[(r, c)];
                        if !(t > 0.0) {
                            return Err(DiffError::Domain {
                                op: "log",
                                row: r,
                                col: c,
                                value: t,
                            });
                        }
                    }
                }
                v.map(f64::ln)
            }
            Unary::Square => v.map(|t| t * t),
            Unary::Abs => v.map(f64::abs),
        };
        Ok(self.push(out, Op::Unary(op, x.0)))
    }

    pub fn sigmoid(&mut self, x: DiffValue) -> DiffValue {
        self.unary(Unary::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn leaky_relu(&mut self, x: DiffValue, slope: f64) -> DiffValue {
        self.unary(Unary::LeakyRelu(slope), x).expect("leaky_relu is total")
    }

    pub fn exp(&mut self, x: DiffValue) -> DiffValue {
        self.unary(Unary::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: DiffValue) -> Result<DiffValue> {
        self.unary(Unary::Log, x)
    }

    pub fn square(&mut self, x: DiffValue) -> DiffValue {
        self.unary(Unary::Square, x).expect("square is total")
    }

    pub fn abs(&mut self, x: DiffValue) -> DiffValue {
        self.unary(Unary::Abs, x).expect("abs is total")
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: DiffValue, c: f64) -> DiffValue {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x.0, c))
    }

    pub fn transpose(&mut self, x: DiffValue) -> DiffValue {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x.0))
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries come out as exactly zero.
    pub fn rowsoftmax_masked(&mut self, scores: DiffValue, mask: &[Vec<bool>]) -> Result<DiffValue> {
        let v = self.value(scores);
        let (rows, cols) = shape(v);
        if mask.len() != rows || mask.iter().any(|r| r.len() != cols) {
            return Err(DiffError::Dimension {
                op: "rowsoftmax_masked",
                lhs: (rows, cols),
                rhs: (mask.len(), mask.first().map_or(0, Vec::len)),
            });
        }
        let mut out = Matrix::zeros(rows, cols);
        for (r, mrow) in mask.iter().enumerate() {
            let max = (0..cols)
                .filter(|&c| mrow[c])
                .map(|c| v[(r, c)])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(DiffError::IsolatedNode { row: r });
            }
            let mut total = 0.0;
            for c in 0..cols {
                if mrow[c] {
                    let e = (v[(r, c)] - max).exp();
                    out[(r, c)] = e;
                    total += e;
                }
            }
            for c in 0..cols {
                out[(r, c)] /= total;
            }
        }
        Ok(self.push(out, Op::RowSoftmaxMasked(scores.0)))
    }

    pub fn concat_rows(&mut self, parts: &[DiffValue]) -> Result<DiffValue> {
        let cols = self.value(parts[0]).ncols();
        for p in parts {
            let s = self.shape(*p);
            if s.1 != cols {
                return Err(DiffError::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]),
                    rhs: s,
                });
            }
        }
        let rows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut r0 = 0;
        for p in parts {
            let v = self.value(*p);
            out.view_mut((r0, 0), (v.nrows(), cols)).copy_from(v);
            r0 += v.nrows();
        }
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    pub fn concat_cols(&mut self, parts: &[DiffValue]) -> Result<DiffValue> {
        let rows = self.value(parts[0]).nrows();
        for p in parts {
            let s = self.shape(*p);
            if s.0 != rows {
                return Err(DiffError::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]),
                    rhs: s,
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let v = self.value(*p);
            out.view_mut((0, c0), (rows, v.ncols())).copy_from(v);
            c0 += v.ncols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    /// Sub-block starting at `(row0, col0)` with the given extent.
    pub fn slice(
        &mut self,
        x: DiffValue,
        (row0, col0): (usize, usize),
        (rows, cols): (usize, usize),
    ) -> Result<DiffValue> {
        let v = self.value(x);
        if row0 + rows > v.nrows() || col0 + cols > v.ncols() {
            return Err(DiffError::Dimension {
                op: "slice",
                lhs: shape(v),
                rhs: (row0 + rows, col0 + cols),
            });
        }
        let out = v.view((row0, col0), (rows, cols)).into_owned();
        Ok(self.push(out, Op::Slice { src: x.0, row0, col0 }))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: DiffValue, rows: usize, cols: usize) -> Result<DiffValue> {
        let v = self.value(x);
        if v.len() != rows * cols {
            return Err(DiffError::Dimension {
                op: "reshape",
                lhs: shape(v),
                rhs: (rows, cols),
            });
        }
        let row_major: Vec<f64> = v.transpose().as_slice().to_vec();
        let out = Matrix::from_row_slice(rows, cols, &row_major);
        Ok(self.push(out, Op::Reshape(x.0)))
    }

    pub fn sum(&mut self, x: DiffValue) -> DiffValue {
        let s = self.value(x).sum();
        self.push(Matrix::from_element(1, 1, s), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: DiffValue) -> DiffValue {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        self.push(Matrix::from_element(1, 1, s), Op::Mean(x.0))
    }

    pub fn trace(&mut self, x: DiffValue) -> Result<DiffValue> {
        let v = self.value(x);
        if v.nrows() != v.ncols() {
            return Err(DiffError::Dimension {
                op: "trace",
                lhs: shape(v),
                rhs: (v.ncols(), v.nrows()),
            });
        }
        let t = v.trace();
        Ok(self.push(Matrix::from_element(1, 1, t), Op::Trace(x.0)))
    }

    pub fn frobenius_sq(&mut self, x: DiffValue) -> DiffValue {
        let s = self.value(x).norm_squared();
        self.push(Matrix::from_element(1, 1, s), Op::FrobeniusSq(x.0))
    }

    /// Euclidean norm of all entries; the subgradient at zero is zero.
    pub fn l2_norm(&mut self, x: DiffValue) -> DiffValue {
        let s = self.value(x).norm();
        self.push(Matrix::from_element(1, 1, s), Op::L2Norm(x.0))
    }

    /// Euclidean norm of each row, as a column vector.
    pub fn row_norms(&mut self, x: DiffValue) -> DiffValue {
        let v = self.value(x);
        let out = Matrix::from_iterator(v.nrows(), 1, v.row_iter().map(|r| r.norm()));
        self.push(out, Op::RowNorms(x.0))
    }

    pub fn gather_rows(&mut self, x: DiffValue, rows: &[usize]) -> Result<DiffValue> {
        let v = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.nrows()) {
            return Err(DiffError::Dimension {
                op: "gather_rows",
                lhs: shape(v),
                rhs: (bad, v.ncols()),
            });
        }
        let mut out = Matrix::zeros(rows.len(), v.ncols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from(&v.row(r));
        }
        Ok(self.push(out, Op::GatherRows(x.0, rows.to_vec())))
    }

    /// Places the entries of a column vector at the given positions of a
    /// zero `rows × cols` matrix; repeated positions accumulate.
    pub fn scatter(
        &mut self,
        x: DiffValue,
        positions: &[(usize, usize)],
        rows: usize,
        cols: usize,
    ) -> Result<DiffValue> {
        let v = self.value(x);
        if v.ncols() != 1 || v.nrows() != positions.len() {
            return Err(DiffError::Dimension {
                op: "scatter",
                lhs: shape(v),
                rhs: (positions.len(), 1),
            });
        }
        if let Some(&(r, c)) = positions.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(DiffError::Dimension {
                op: "scatter",
                lhs: (rows, cols),
                rhs: (r, c),
            });
        }
        let mut out = Matrix::zeros(rows, cols);
        for (k, &(r, c)) in positions.iter().enumerate() {
            out[(r, c)] += v[(k, 0)];
        }
        Ok(self.push(out, Op::Scatter(x.0, positions.to_vec())))
    }

    /// Column-wise max over each row segment. Ties resolve to the first row
    /// listed in the segment.
    pub fn segment_max(&mut self, x: DiffValue, segments: &[Vec<usize>]) -> Result<DiffValue> {
        let v = self.value(x);
        let cols = v.ncols();
        let mut out = Matrix::zeros(segments.len(), cols);
        let mut argmax = Vec::with_capacity(segments.len() * cols);
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() || seg.iter().any(|&r| r >= v.nrows()) {
                return Err(DiffError::Dimension {
                    op: "segment_max",
                    lhs: shape(v),
                    rhs: (seg.len(), s),
                });
            }
            for c in 0..cols {
                let mut best = seg[0];
                for &r in &seg[1..] {
                    if v[(r, c)] > v[(best, c)] {
                        best = r;
                    }
                }
                out[(s, c)] = v[(best, c)];
                argmax.push(best);
            }
        }
        Ok(self.push(out, Op::SegmentMax { src: x.0, argmax }))
    }

    /// Column vector → diagonal matrix.
    pub fn diag(&mut self, x: DiffValue) -> Result<DiffValue> {
        let v = self.value(x);
        if v.ncols() != 1 {
            return Err(DiffError::Dimension {
                op: "diag",
                lhs: shape(v),
                rhs: (v.nrows(), 1),
            });
        }
        let out = Matrix::from_diagonal(&v.column(0).into_owned());
        Ok(self.push(out, Op::Diag(x.0)))
    }

    /// Repeats a `1 × c` row `rows` times.
    pub fn broadcast_rows(&mut self, x: DiffValue, rows: usize) -> Result<DiffValue> {
        let v = self.value(x);
        if v.nrows() != 1 {
            return Err(DiffError::Dimension {
                op: "broadcast_rows",
                lhs: shape(v),
                rhs: (1, v.ncols()),
            });
        }
        let out = Matrix::from_fn(rows, v.ncols(), |_, c| v[(0, c)]);
        Ok(self.push(out, Op::BroadcastRows(x.0)))
    }

    pub fn broadcast_scalar(&mut self, x: DiffValue, rows: usize, cols: usize) -> Result<DiffValue> {
        let v = self.value(x);
        if shape(v) != (1, 1) {
            return Err(DiffError::Dimension {
                op: "broadcast_scalar",
                lhs: shape(v),
                rhs: (1, 1),
            });
        }
        let out = Matrix::from_element(rows, cols, v[(0, 0)]);
        Ok(self.push(out, Op::BroadcastScalar(x.0)))
    }

    /// `x · s` for a `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, x: DiffValue, s: DiffValue) -> Result<DiffValue> {
        let vs = self.value(s);
        if shape(vs) != (1, 1) {
            return Err(DiffError::Dimension {
                op: "mul_scalar",
                lhs: shape(vs),
                rhs: (1, 1),
            });
        }
        let out = self.value(x) * vs[(0, 0)];
        Ok(self.push(out, Op::MulScalar(x.0, s.0)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: DiffValue, lo: f64, hi: f64) -> DiffValue {
        let out = self.value(x).map(|t| t.clamp(lo, hi));
        self.push(out, Op::Clamp(x.0, lo, hi))
    }

    /// `x + b` where `b` is a `1 × c` row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let rows = self.value(x).nrows();
        let bb = self.broadcast_rows(b, rows)?;
        self.add(x, bb)
    }

    /// Operation with a caller-supplied value and vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[DiffValue], value: Matrix, vjp: Vjp) -> DiffValue {
        self.push(value, Op::Custom(inputs.iter().map(|i| i.0).collect(), vjp))
    }

    /// Accumulates `∂root/∂leaf` into every reachable leaf.
    pub fn backward(&mut self, root: DiffValue) -> Result<()> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(DiffError::NonScalarRoot { rows, cols });
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_element(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                accumulate(&mut self.nodes[i].grad, g);
                continue;
            }
            for (parent, pg) in self.node_vjp(i, &g) {
                if self.nodes[parent].requires_grad {
                    accumulate(&mut grads[parent], pg);
                }
            }
        }
        Ok(())
    }

    fn node_vjp(&self, i: usize, g: &Matrix) -> Vec<(usize, Matrix)> {
        let node = &self.nodes[i];
        let val = |k: usize| &self.nodes[k].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, g * val(*b).transpose()),
                (*b, val(*a).transpose() * g),
            ],
            Op::Binary(Binary::Add, a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Binary(Binary::Sub, a, b) => vec![(*a, g.clone()), (*b, -g)],
            Op::Binary(Binary::Mul, a, b) => vec![
                (*a, g.component_mul(val(*b))),
                (*b, g.component_mul(val(*a))),
            ],
            Op::Unary(op, a) => {
                let x = val(*a);
                let local = match op {
                    Unary::Sigmoid => y.map(|s| s * (1.0 - s)),
                    Unary::LeakyRelu(s) => x.map(|t| if t > 0.0 { 1.0 } else { *s }),
                    Unary::Exp => y.clone(),
                    Unary::Log => x.map(|t| 1.0 / t),
                    Unary::Square => x * 2.0,
                    Unary::Abs => x.map(|t| {
                        if t > 0.0 {
                            1.0
                        } else if t < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }),
                };
                vec![(*a, g.component_mul(&local))]
            }
            Op::Scale(a, c) => vec![(*a, g * *c)],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::RowSoftmaxMasked(a) => {
                let mut out = Matrix::zeros(y.nrows(), y.ncols());
                for r in 0..y.nrows() {
                    let dot: f64 = (0..y.ncols()).map(|c| y[(r, c)] * g[(r, c)]).sum();
                    for c in 0..y.ncols() {
                        out[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                vec![(*a, out)]
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).nrows();
                        let block = g.view((r0, 0), (n, g.ncols())).into_owned();
                        r0 += n;
                        (p, block)
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).ncols();
                        let block = g.view((0, c0), (g.nrows(), n)).into_owned();
                        c0 += n;
                        (p, block)
                    })
                    .collect()
            }
            Op::Slice { src, row0, col0 } => {
                let s = val(*src);
                let mut out = Matrix::zeros(s.nrows(), s.ncols());
                out.view_mut((*row0, *col0), (g.nrows(), g.ncols())).copy_from(g);
                vec![(*src, out)]
            }
            Op::Reshape(a) => {
                let s = val(*a);
                let row_major: Vec<f64> = g.transpose().as_slice().to_vec();
                vec![(*a, Matrix::from_row_slice(s.nrows(), s.ncols(), &row_major))]
            }
            Op::Sum(a) => {
                let s = val(*a);
                vec![(*a, Matrix::from_element(s.nrows(), s.ncols(), g[(0, 0)]))]
            }
            Op::Mean(a) => {
                let s = val(*a);
                let w = g[(0, 0)] / s.len() as f64;
                vec![(*a, Matrix::from_element(s.nrows(), s.ncols(), w))]
            }
            Op::Trace(a) => {
                let n = val(*a).nrows();
                vec![(*a, Matrix::identity(n, n) * g[(0, 0)])]
            }
            Op::FrobeniusSq(a) => vec![(*a, val(*a) * (2.0 * g[(0, 0)]))],
            Op::L2Norm(a) => {
                let norm = y[(0, 0)];
                let x = val(*a);
                let out = if norm > 0.0 {
                    x * (g[(0, 0)] / norm)
                } else {
                    Matrix::zeros(x.nrows(), x.ncols())
                };
                vec![(*a, out)]
            }
            Op::RowNorms(a) => {
                let x = val(*a);
                let mut out = Matrix::zeros(x.nrows(), x.ncols());
                for r in 0..x.nrows() {
                    let norm = y[(r, 0)];
                    if norm > 0.0 {
                        let w = g[(r, 0)] / norm;
                        for c in 0..x.ncols() {
                            out[(r, c)] = x[(r, c)] * w;
                        }
                    }
                }
                vec![(*a, out)]
            }
            Op::GatherRows(a, rows) => {
                let x = val(*a);
                let mut out = Matrix::zeros(x.nrows(), x.ncols());
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..x.ncols() {
                        out[(r, c)] += g[(i, c)];
                    }
                }
                vec![(*a, out)]
            }
            Op::Scatter(a, positions) => {
                let out = Matrix::from_iterator(
                    positions.len(),
                    1,
                    positions.iter().map(|&(r, c)| g[(r, c)]),
                );
                vec![(*a, out)]
            }
            Op::SegmentMax { src, argmax } => {
                let x = val(*src);
                let cols = x.ncols();
                let mut out = Matrix::zeros(x.nrows(), cols);
                for s in 0..g.nrows() {
                    for c in 0..cols {
                        out[(argmax[s * cols + c], c)] += g[(s, c)];
                    }
                }
                vec![(*src, out)]
            }
            Op::Diag(a) => {
                let n = val(*a).nrows();
                vec![(*a, Matrix::from_iterator(n, 1, (0..n).map(|k| g[(k, k)])))]
            }
            Op::BroadcastRows(a) => {
                let cols = g.ncols();
                let out = Matrix::from_iterator(1, cols, (0..cols).map(|c| g.column(c).sum()));
                vec![(*a, out)]
            }
            Op::BroadcastScalar(a) => vec![(*a, Matrix::from_element(1, 1, g.sum()))],
            Op::MulScalar(x, s) => {
                let sv = val(*s)[(0, 0)];
                let dot = g.component_mul(val(*x)).sum();
                vec![(*x, g * sv), (*s, Matrix::from_element(1, 1, dot))]
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                let mask = x.map(|t| if t < *lo || t > *hi { 0.0 } else { 1.0 });
                vec![(*a, g.component_mul(&mask))]
            }
            Op::Custom(inputs, vjp) => inputs.iter().copied().zip(vjp(g)).collect(),
        }
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
