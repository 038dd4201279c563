//! Tape-based reverse-mode automatic differentiation over small dense matrices.
//!
//! Every tensor in this project is a dense `f64` matrix no larger than a few
//! thousand entries, so the engine keeps the whole computation on a single
//! append-only tape: forward operations push nodes in execution order and
//! [`Value::backward`] replays them in exact reverse order, accumulating
//! gradients through the chain rule. One tape belongs to one thread; parallel
//! training runs use independent tapes.
//!
//! Shape mismatches are programming errors and panic with the offending
//! primitive and both shapes. Numeric failures during finite-difference
//! verification are reported as [`GradError`].

use ndarray::{s, Array2};
use std::cell::RefCell;
use std::rc::Rc;
use thiserror::Error;

/// Errors surfaced by the finite-difference gradient checker.
#[derive(Debug, Error)]
pub enum GradError {
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("non-finite loss at the unperturbed evaluation point")]
    NonFiniteBase,
    #[error("non-finite loss while perturbing parameter {param_index} at ({row}, {col})")]
    NonFiniteLoss {
        param_index: usize,
        row: usize,
        col: usize,
    },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    /// Broadcast-add a 1×n row vector over every row of an m×n matrix.
    AddRow(usize, usize),
    /// Broadcast-multiply a 1×n row vector into every row of an m×n matrix.
    MulRow(usize, usize),
    /// Repeat each row k consecutive times: out\[p\] = in\[p / k\].
    RepeatRows(usize, usize),
    /// Stack the whole matrix k times: out\[p\] = in\[p mod m\].
    TileRows(usize, usize),
    /// Sum each consecutive block of k rows: out\[i\] = Σ in\[i·k .. (i+1)·k\].
    BlockSumRows(usize, usize),
    Reshape(usize),
}

struct Node {
    data: Array2<f64>,
    /// Lazily allocated; stays `None` for nodes that never receive gradient.
    grad: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, data: Array2<f64>, op: Op, requires_grad: bool) -> Value {
        let mut nodes = self.inner.borrow_mut();
        nodes.push(Node {
            data,
            grad: None,
            op,
            requires_grad,
        });
        Value {
            tape: self.clone(),
            idx: nodes.len() - 1,
        }
    }

    /// Record an input that does not receive gradient.
    pub fn constant(&self, data: Array2<f64>) -> Value {
        self.push(data, Op::Leaf, false)
    }

    /// Record a trainable input; `backward` accumulates ∂output/∂param here.
    pub fn param(&self, data: Array2<f64>) -> Value {
        self.push(data, Op::Leaf, true)
    }

    /// 1×1 constant.
    pub fn scalar(&self, x: f64) -> Value {
        self.constant(Array2::from_elem((1, 1), x))
    }
}

/// Handle to one node on a [`Tape`].
#[derive(Clone)]
pub struct Value {
    tape: Tape,
    idx: usize,
}

fn shape_panic(op: &str, a: (usize, usize), b: (usize, usize)) -> ! {
    panic!("{op}: incompatible shapes {a:?} and {b:?}");
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Value {
    pub fn shape(&self) -> (usize, usize) {
        self.tape.inner.borrow()[self.idx].data.dim()
    }

    pub fn data(&self) -> Array2<f64> {
        self.tape.inner.borrow()[self.idx].data.clone()
    }

    /// Scalar convenience accessor; panics unless the value is 1×1.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.dim(), (1, 1), "item() requires a 1x1 value");
        d[(0, 0)]
    }

    /// Accumulated gradient (zeros if none was propagated).
    pub fn grad(&self) -> Array2<f64> {
        let nodes = self.tape.inner.borrow();
        match &nodes[self.idx].grad {
            Some(g) => g.clone(),
            None => Array2::zeros(nodes[self.idx].data.dim()),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow()[self.idx].requires_grad
    }

    fn same_tape(&self, other: &Value) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "values belong to different tapes"
        );
    }

    fn node_data(&self, idx: usize) -> Array2<f64> {
        self.tape.inner.borrow()[idx].data.clone()
    }

    fn node_requires_grad(&self, idx: usize) -> bool {
        self.tape.inner.borrow()[idx].requires_grad
    }

    fn check_elementwise(&self, other: &Value, op_name: &str) {
        self.same_tape(other);
        if self.shape() != other.shape() {
            shape_panic(op_name, self.shape(), other.shape());
        }
    }

    fn push_binary(&self, other: &Value, data: Array2<f64>, op: Op) -> Value {
        let rg = self.node_requires_grad(self.idx) || other.node_requires_grad(other.idx);
        self.tape.push(data, op, rg)
    }

    fn push_unary(&self, data: Array2<f64>, op: Op) -> Value {
        let rg = self.node_requires_grad(self.idx);
        self.tape.push(data, op, rg)
    }

    // ── element-wise binary ─────────────────────────────────────────

    pub fn add(&self, other: &Value) -> Value {
        self.check_elementwise(other, "add");
        let d = &self.node_data(self.idx) + &other.node_data(other.idx);
        self.push_binary(other, d, Op::Add(self.idx, other.idx))
    }

    pub fn sub(&self, other: &Value) -> Value {
        self.check_elementwise(other, "sub");
        let d = &self.node_data(self.idx) - &other.node_data(other.idx);
        self.push_binary(other, d, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(&self, other: &Value) -> Value {
        self.check_elementwise(other, "mul");
        let d = &self.node_data(self.idx) * &other.node_data(other.idx);
        self.push_binary(other, d, Op::Mul(self.idx, other.idx))
    }

    pub fn div(&self, other: &Value) -> Value {
        self.check_elementwise(other, "div");
        let d = &self.node_data(self.idx) / &other.node_data(other.idx);
        self.push_binary(other, d, Op::Div(self.idx, other.idx))
    }

    pub fn matmul(&self, other: &Value) -> Value {
        self.same_tape(other);
        let (m, k) = self.shape();
        let (k2, n) = other.shape();
        if k != k2 {
            shape_panic("matmul", (m, k), (k2, n));
        }
        let d = self.node_data(self.idx).dot(&other.node_data(other.idx));
        self.push_binary(other, d, Op::MatMul(self.idx, other.idx))
    }

    // ── element-wise unary ──────────────────────────────────────────

    pub fn scale(&self, c: f64) -> Value {
        let d = self.node_data(self.idx).mapv(|x| c * x);
        self.push_unary(d, Op::Scale(self.idx, c))
    }

    pub fn tanh(&self) -> Value {
        let d = self.node_data(self.idx).mapv(f64::tanh);
        self.push_unary(d, Op::Tanh(self.idx))
    }

    pub fn sigmoid(&self) -> Value {
        let d = self.node_data(self.idx).mapv(logistic);
        self.push_unary(d, Op::Sigmoid(self.idx))
    }

    /// Element-wise |x|; the backward rule uses subgradient 0 at the origin.
    pub fn abs(&self) -> Value {
        let d = self.node_data(self.idx).mapv(f64::abs);
        self.push_unary(d, Op::Abs(self.idx))
    }

    pub fn square(&self) -> Value {
        let d = self.node_data(self.idx).mapv(|x| x * x);
        self.push_unary(d, Op::Square(self.idx))
    }

    /// Element-wise √x; the backward rule contributes 0 where x = 0, which is
    /// the norm-subgradient convention that keeps √(Σd²) trainable at d = 0.
    pub fn sqrt(&self) -> Value {
        let d = self.node_data(self.idx).mapv(f64::sqrt);
        self.push_unary(d, Op::Sqrt(self.idx))
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Sum of all entries as a 1×1 value.
    pub fn sum(&self) -> Value {
        let d = Array2::from_elem((1, 1), self.node_data(self.idx).sum());
        self.push_unary(d, Op::Sum(self.idx))
    }

    /// Mean of all entries as a 1×1 value.
    pub fn mean(&self) -> Value {
        let data = self.node_data(self.idx);
        let n = data.len() as f64;
        let d = Array2::from_elem((1, 1), data.sum() / n);
        self.push_unary(d, Op::Mean(self.idx))
    }

    /// Sum along `axis` (0 → 1×n row of column sums, 1 → m×1 column of row sums).
    pub fn sum_axis(&self, axis: usize) -> Value {
        assert!(axis < 2, "sum_axis: axis must be 0 or 1, got {axis}");
        let data = self.node_data(self.idx);
        let (m, n) = data.dim();
        let d = if axis == 0 {
            Array2::from_shape_fn((1, n), |(_, c)| data.column(c).sum())
        } else {
            Array2::from_shape_fn((m, 1), |(r, _)| data.row(r).sum())
        };
        self.push_unary(d, Op::SumAxis(self.idx, axis))
    }

    pub fn mean_axis(&self, axis: usize) -> Value {
        assert!(axis < 2, "mean_axis: axis must be 0 or 1, got {axis}");
        let data = self.node_data(self.idx);
        let (m, n) = data.dim();
        let d = if axis == 0 {
            Array2::from_shape_fn((1, n), |(_, c)| data.column(c).sum() / m as f64)
        } else {
            Array2::from_shape_fn((m, 1), |(r, _)| data.row(r).sum() / n as f64)
        };
        self.push_unary(d, Op::MeanAxis(self.idx, axis))
    }

    // ── structural ──────────────────────────────────────────────────

    pub fn transpose(&self) -> Value {
        let data = self.node_data(self.idx);
        let (m, n) = data.dim();
        let d = Array2::from_shape_fn((n, m), |(r, c)| data[(c, r)]);
        self.push_unary(d, Op::Transpose(self.idx))
    }

    /// Stack values vertically; all inputs must share the column count.
    pub fn concat_rows(parts: &[&Value]) -> Value {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let first = parts[0];
        let n = first.shape().1;
        let mut rows = 0;
        for p in parts {
            first.same_tape(p);
            if p.shape().1 != n {
                shape_panic("concat_rows", first.shape(), p.shape());
            }
            rows += p.shape().0;
        }
        let mut d = Array2::zeros((rows, n));
        let mut r0 = 0;
        for p in parts {
            let pd = p.node_data(p.idx);
            let h = pd.nrows();
            d.slice_mut(s![r0..r0 + h, ..]).assign(&pd);
            r0 += h;
        }
        let rg = parts.iter().any(|p| p.node_requires_grad(p.idx));
        let idxs = parts.iter().map(|p| p.idx).collect();
        first.tape.push(d, Op::ConcatRows(idxs), rg)
    }

    /// Stack values horizontally; all inputs must share the row count.
    pub fn concat_cols(parts: &[&Value]) -> Value {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let first = parts[0];
        let m = first.shape().0;
        let mut cols = 0;
        for p in parts {
            first.same_tape(p);
            if p.shape().0 != m {
                shape_panic("concat_cols", first.shape(), p.shape());
            }
            cols += p.shape().1;
        }
        let mut d = Array2::zeros((m, cols));
        let mut c0 = 0;
        for p in parts {
            let pd = p.node_data(p.idx);
            let w = pd.ncols();
            d.slice_mut(s![.., c0..c0 + w]).assign(&pd);
            c0 += w;
        }
        let rg = parts.iter().any(|p| p.node_requires_grad(p.idx));
        let idxs = parts.iter().map(|p| p.idx).collect();
        first.tape.push(d, Op::ConcatCols(idxs), rg)
    }

    /// Broadcast-add a 1×n row over every row of self (m×n).
    pub fn add_row(&self, row: &Value) -> Value {
        self.same_tape(row);
        let (m, n) = self.shape();
        let (rr, rc) = row.shape();
        if rr != 1 || rc != n {
            shape_panic("add_row", (m, n), (rr, rc));
        }
        let a = self.node_data(self.idx);
        let r = row.node_data(row.idx);
        let d = Array2::from_shape_fn((m, n), |(i, j)| a[(i, j)] + r[(0, j)]);
        let rg = self.node_requires_grad(self.idx) || row.node_requires_grad(row.idx);
        self.tape.push(d, Op::AddRow(self.idx, row.idx), rg)
    }

    /// Broadcast-multiply a 1×n row into every row of self (m×n).
    pub fn mul_row(&self, row: &Value) -> Value {
        self.same_tape(row);
        let (m, n) = self.shape();
        let (rr, rc) = row.shape();
        if rr != 1 || rc != n {
            shape_panic("mul_row", (m, n), (rr, rc));
        }
        let a = self.node_data(self.idx);
        let r = row.node_data(row.idx);
        let d = Array2::from_shape_fn((m, n), |(i, j)| a[(i, j)] * r[(0, j)]);
        let rg = self.node_requires_grad(self.idx) || row.node_requires_grad(row.idx);
        self.tape.push(d, Op::MulRow(self.idx, row.idx), rg)
    }

    /// Repeat each row k consecutive times (m×n → mk×n).
    pub fn repeat_rows(&self, k: usize) -> Value {
        assert!(k >= 1, "repeat_rows: k must be >= 1");
        let a = self.node_data(self.idx);
        let (m, n) = a.dim();
        let d = Array2::from_shape_fn((m * k, n), |(p, j)| a[(p / k, j)]);
        self.push_unary(d, Op::RepeatRows(self.idx, k))
    }

    /// Stack the whole matrix k times (m×n → km×n).
    pub fn tile_rows(&self, k: usize) -> Value {
        assert!(k >= 1, "tile_rows: k must be >= 1");
        let a = self.node_data(self.idx);
        let (m, n) = a.dim();
        let d = Array2::from_shape_fn((m * k, n), |(p, j)| a[(p % m, j)]);
        self.push_unary(d, Op::TileRows(self.idx, k))
    }

    /// Sum each consecutive block of k rows (bk×n → b×n).
    pub fn block_sum_rows(&self, k: usize) -> Value {
        let a = self.node_data(self.idx);
        let (rows, n) = a.dim();
        assert!(
            k >= 1 && rows % k == 0,
            "block_sum_rows: row count {rows} not divisible by block size {k}"
        );
        let b = rows / k;
        let mut d = Array2::zeros((b, n));
        for p in 0..rows {
            for j in 0..n {
                d[(p / k, j)] += a[(p, j)];
            }
        }
        self.push_unary(d, Op::BlockSumRows(self.idx, k))
    }

    /// Row-major reshape; entry count must be preserved.
    pub fn reshape(&self, rows: usize, cols: usize) -> Value {
        let a = self.node_data(self.idx);
        let (m, n) = a.dim();
        if rows * cols != m * n {
            shape_panic("reshape", (m, n), (rows, cols));
        }
        let d = Array2::from_shape_vec((rows, cols), a.iter().cloned().collect())
            .expect("reshape: element count checked above");
        self.push_unary(d, Op::Reshape(self.idx))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from this scalar: zeroes all gradients, seeds ∂out/∂out = 1,
    /// then visits recorded operations in exact reverse order, accumulating
    /// additively so a value used on several paths receives the path sum.
    ///
    /// Panics if the output is not 1×1.
    pub fn backward(&self) {
        let mut nodes = self.tape.inner.borrow_mut();
        let nodes = &mut *nodes;
        let (r, c) = nodes[self.idx].data.dim();
        assert!(
            (r, c) == (1, 1),
            "backward requires a 1x1 scalar output, got ({r}, {c})"
        );
        for node in nodes.iter_mut() {
            if let Some(g) = &mut node.grad {
                g.fill(0.0);
            }
        }
        nodes[self.idx].grad = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=self.idx).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let g = match &nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = nodes[i].op.clone();
            let out = nodes[i].data.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(nodes, a, g.clone());
                    accumulate(nodes, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(nodes, a, g.clone());
                    accumulate(nodes, b, -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &nodes[b].data;
                    let db = &g * &nodes[a].data;
                    accumulate(nodes, a, da);
                    accumulate(nodes, b, db);
                }
                Op::Div(a, b) => {
                    let bd = nodes[b].data.clone();
                    let da = &g / &bd;
                    let db = -(&g * &out) / &bd;
                    accumulate(nodes, a, da);
                    accumulate(nodes, b, db);
                }
                Op::MatMul(a, b) => {
                    let ad = nodes[a].data.clone();
                    let bd = nodes[b].data.clone();
                    accumulate(nodes, a, g.dot(&bd.t()));
                    accumulate(nodes, b, ad.t().dot(&g));
                }
                Op::Scale(a, cst) => accumulate(nodes, a, g.mapv(|x| cst * x)),
                Op::Tanh(a) => {
                    let da = &g * &out.mapv(|y| 1.0 - y * y);
                    accumulate(nodes, a, da);
                }
                Op::Sigmoid(a) => {
                    let da = &g * &out.mapv(|y| y * (1.0 - y));
                    accumulate(nodes, a, da);
                }
                Op::Abs(a) => {
                    let sign = nodes[a].data.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(nodes, a, &g * &sign);
                }
                Op::Square(a) => {
                    let da = &g * &nodes[a].data.mapv(|x| 2.0 * x);
                    accumulate(nodes, a, da);
                }
                Op::Sqrt(a) => {
                    let da = ndarray::Zip::from(&g)
                        .and(&out)
                        .map_collect(|&gi, &yi| if yi == 0.0 { 0.0 } else { gi / (2.0 * yi) });
                    accumulate(nodes, a, da);
                }
                Op::Sum(a) => {
                    let g0 = g[(0, 0)];
                    let da = Array2::from_elem(nodes[a].data.dim(), g0);
                    accumulate(nodes, a, da);
                }
                Op::Mean(a) => {
                    let dim = nodes[a].data.dim();
                    let g0 = g[(0, 0)] / (dim.0 * dim.1) as f64;
                    accumulate(nodes, a, Array2::from_elem(dim, g0));
                }
                Op::SumAxis(a, axis) => {
                    let (m, n) = nodes[a].data.dim();
                    let da = if axis == 0 {
                        Array2::from_shape_fn((m, n), |(_, j)| g[(0, j)])
                    } else {
                        Array2::from_shape_fn((m, n), |(i, _)| g[(i, 0)])
                    };
                    accumulate(nodes, a, da);
                }
                Op::MeanAxis(a, axis) => {
                    let (m, n) = nodes[a].data.dim();
                    let da = if axis == 0 {
                        Array2::from_shape_fn((m, n), |(_, j)| g[(0, j)] / m as f64)
                    } else {
                        Array2::from_shape_fn((m, n), |(i, _)| g[(i, 0)] / n as f64)
                    };
                    accumulate(nodes, a, da);
                }
                Op::Transpose(a) => {
                    let (m, n) = nodes[a].data.dim();
                    let da = Array2::from_shape_fn((m, n), |(i, j)| g[(j, i)]);
                    accumulate(nodes, a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let h = nodes[p].data.nrows();
                        let slice = g.slice(s![r0..r0 + h, ..]).to_owned();
                        accumulate(nodes, p, slice);
                        r0 += h;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = nodes[p].data.ncols();
                        let slice = g.slice(s![.., c0..c0 + w]).to_owned();
                        accumulate(nodes, p, slice);
                        c0 += w;
                    }
                }
                Op::AddRow(a, rv) => {
                    let dr = Array2::from_shape_fn((1, g.ncols()), |(_, j)| g.column(j).sum());
                    accumulate(nodes, a, g);
                    accumulate(nodes, rv, dr);
                }
                Op::MulRow(a, rv) => {
                    let rd = nodes[rv].data.clone();
                    let ad = nodes[a].data.clone();
                    let da = Array2::from_shape_fn(ad.dim(), |(i, j)| g[(i, j)] * rd[(0, j)]);
                    let dr = Array2::from_shape_fn((1, g.ncols()), |(_, j)| {
                        (0..g.nrows()).map(|i| g[(i, j)] * ad[(i, j)]).sum()
                    });
                    accumulate(nodes, a, da);
                    accumulate(nodes, rv, dr);
                }
                Op::RepeatRows(a, k) => {
                    let (m, n) = nodes[a].data.dim();
                    let mut da = Array2::zeros((m, n));
                    for p in 0..m * k {
                        for j in 0..n {
                            da[(p / k, j)] += g[(p, j)];
                        }
                    }
                    accumulate(nodes, a, da);
                }
                Op::TileRows(a, k) => {
                    let (m, n) = nodes[a].data.dim();
                    let mut da = Array2::zeros((m, n));
                    for p in 0..m * k {
                        for j in 0..n {
                            da[(p % m, j)] += g[(p, j)];
                        }
                    }
                    accumulate(nodes, a, da);
                }
                Op::BlockSumRows(a, k) => {
                    let (rows, n) = nodes[a].data.dim();
                    let da = Array2::from_shape_fn((rows, n), |(p, j)| g[(p / k, j)]);
                    accumulate(nodes, a, da);
                }
                Op::Reshape(a) => {
                    let dim = nodes[a].data.dim();
                    let da = Array2::from_shape_vec(dim, g.iter().cloned().collect())
                        .expect("reshape backward: element counts match");
                    accumulate(nodes, a, da);
                }
            }
        }
    }
}

fn accumulate(nodes: &mut [Node], idx: usize, delta: Array2<f64>) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut nodes[idx].grad {
        Some(g) => *g += &delta,
        None => nodes[idx].grad = Some(delta),
    }
}

/// Compare the analytic gradient of `build_loss` against central finite
/// differences with the given step, returning the maximum relative error
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)` over all
/// parameter entries.
///
/// `build_loss` must construct a deterministic 1×1 loss from the given leaf
/// values; it is re-invoked on fresh tapes for every perturbed evaluation.
pub fn finite_diff_check<F>(build_loss: F, init: &[Array2<f64>], step: f64) -> Result<f64, GradError>
where
    F: Fn(&Tape, &[Value]) -> Value,
{
    if !(step > 0.0) {
        return Err(GradError::InvalidStep(step));
    }

    let tape = Tape::new();
    let params: Vec<Value> = init.iter().map(|m| tape.param(m.clone())).collect();
    let loss = build_loss(&tape, &params);
    if !loss.item().is_finite() {
        return Err(GradError::NonFiniteBase);
    }
    loss.backward();
    let analytic: Vec<Array2<f64>> = params.iter().map(Value::grad).collect();

    let eval = |mats: &[Array2<f64>]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Value> = mats.iter().map(|m| t.constant(m.clone())).collect();
        build_loss(&t, &vs).item()
    };

    let mut max_rel = 0.0_f64;
    let mut work: Vec<Array2<f64>> = init.to_vec();
    for pi in 0..init.len() {
        let (m, n) = init[pi].dim();
        for row in 0..m {
            for col in 0..n {
                let x0 = init[pi][(row, col)];
                work[pi][(row, col)] = x0 + step;
                let f_plus = eval(&work);
                work[pi][(row, col)] = x0 - step;
                let f_minus = eval(&work);
                work[pi][(row, col)] = x0;
                if !f_plus.is_finite() || !f_minus.is_finite() {
                    return Err(GradError::NonFiniteLoss {
                        param_index: pi,
                        row,
                        col,
                    });
                }
                let numeric = (f_plus - f_minus) / (2.0 * step);
                let a = analytic[pi][(row, col)];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(max_rel)
}
