//! Matrix-valued reverse-mode tape with higher-order support.
//!
//! Every node holds a dense `rows × cols` value. Backward rules are themselves
//! expressed as tape operations, so the gradients returned by [`Tape::grad`]
//! are ordinary nodes that can be differentiated again. This is what lets a
//! training loss contain input gradients and Hessian-vector products of a
//! network and still be differentiated with respect to the network weights.
//!
//! Batches are laid out column-wise: a batch of `n` points in `R^d` is a
//! `d × n` node, and a scalar field evaluated on it is `1 × n`.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use ndarray::{Array2, Axis};

/// Elementwise functions with closed-form derivatives of every order the
/// crate needs. `Func::eval(k, x)` returns the k-th derivative at `x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Func {
    Exp,
    Ln,
    Sin,
    Cos,
    Tanh,
    Softplus,
    /// Piecewise-cubic C² rectifier: zero for `x <= 0`, `x - w/2` for `x >= w`.
    SmoothRelu(f64),
    Relu,
    Elu,
    Square,
    Recip,
    /// `x^e` for `x > 0`.
    Powf(f64),
}

impl Func {
    /// k-th derivative of the function at `x`.
    ///
    /// Panics for `Tanh`/`Softplus` beyond order 4; nothing in the crate
    /// differentiates those more than three times.
    pub fn eval(self, order: u8, x: f64) -> f64 {
        match self {
            Func::Exp => x.exp(),
            Func::Ln => {
                if order == 0 {
                    x.ln()
                } else {
                    let k = order as i32;
                    let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                    sign * factorial(order - 1) / x.powi(k)
                }
            }
            Func::Sin => match order % 4 {
                0 => x.sin(),
                1 => x.cos(),
                2 => -x.sin(),
                _ => -x.cos(),
            },
            Func::Cos => match order % 4 {
                0 => x.cos(),
                1 => -x.sin(),
                2 => -x.cos(),
                _ => x.sin(),
            },
            Func::Tanh => {
                let t = x.tanh();
                let s = 1.0 - t * t;
                match order {
                    0 => t,
                    1 => s,
                    2 => -2.0 * t * s,
                    3 => -2.0 * s * (1.0 - 3.0 * t * t),
                    4 => 8.0 * t * s * (2.0 - 3.0 * t * t),
                    _ => panic!("tanh derivative of order {order} is not supported"),
                }
            }
            Func::Softplus => {
                let s = sigmoid(x);
                match order {
                    0 => softplus(x),
                    1 => s,
                    2 => s * (1.0 - s),
                    3 => s * (1.0 - s) * (1.0 - 2.0 * s),
                    4 => s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s * s),
                    _ => panic!("softplus derivative of order {order} is not supported"),
                }
            }
            Func::SmoothRelu(w) => smooth_relu(order, w, x),
            Func::Relu => match order {
                0 => x.max(0.0),
                1 => {
                    if x > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            },
            Func::Elu => {
                if x > 0.0 {
                    match order {
                        0 => x,
                        1 => 1.0,
                        _ => 0.0,
                    }
                } else if order == 0 {
                    x.exp_m1()
                } else {
                    x.exp()
                }
            }
            Func::Square => match order {
                0 => x * x,
                1 => 2.0 * x,
                2 => 2.0,
                _ => 0.0,
            },
            Func::Recip => {
                let k = order as i32;
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                sign * factorial(order) / x.powi(k + 1)
            }
            Func::Powf(e) => {
                let mut coef = 1.0;
                for j in 0..order {
                    coef *= e - j as f64;
                }
                if coef == 0.0 {
                    0.0
                } else {
                    coef * x.powf(e - order as f64)
                }
            }
        }
    }
}

fn factorial(n: u8) -> f64 {
    (1..=n as u32).map(f64::from).product()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// The C² rectifier: its second derivative is a unit-area triangle on `[0, w]`.
pub(crate) fn smooth_relu(order: u8, w: f64, x: f64) -> f64 {
    let half = 0.5 * w;
    let w2 = w * w;
    if x <= 0.0 {
        return 0.0;
    }
    if x >= w {
        return match order {
            0 => x - half,
            1 => 1.0,
            _ => 0.0,
        };
    }
    if x <= half {
        match order {
            0 => 2.0 * x * x * x / (3.0 * w2),
            1 => 2.0 * x * x / w2,
            2 => 4.0 * x / w2,
            3 => 4.0 / w2,
            _ => 0.0,
        }
    } else {
        let r = w - x;
        match order {
            0 => x - half + 2.0 * r * r * r / (3.0 * w2),
            1 => 1.0 - 2.0 * r * r / w2,
            2 => 4.0 * r / w2,
            3 => -4.0 / w2,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Unary(usize, Func, u8),
    SumAll(usize),
    ColSums(usize),
    RowSums(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    BroadcastScalar(usize),
    SelectRows(usize, Rc<[usize]>),
    ScatterRows(usize, Rc<[usize]>),
    Reshape(usize),
    Constant,
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b, .. } => {
                [Some(a), Some(b)]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Unary(a, _, _)
            | Op::SumAll(a)
            | Op::ColSums(a)
            | Op::RowSums(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::BroadcastScalar(a)
            | Op::SelectRows(a, _)
            | Op::ScatterRows(a, _)
            | Op::Reshape(a) => [Some(a), None],
            Op::Constant => [None, None],
        }
    }
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// An append-only computation record. Create one per evaluation; it is not
/// shared between threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// A differentiable matrix value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Array2<f64>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input. Differentiation is requested later through
    /// [`Tape::grad`]; leaves and constants differ only in intent.
    pub fn var(&self, value: Array2<f64>) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    /// A value that is never differentiated through.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// A `d × 1` column from a slice.
    pub fn column(&self, values: &[f64]) -> Var<'_> {
        self.var(column(values))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_> {
        self.constant(Array2::zeros((rows, cols)))
    }

    fn value_of(&self, id: usize) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn unary_value(&self, a: usize, f: impl FnOnce(&Array2<f64>) -> Array2<f64>) -> Array2<f64> {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value)
    }

    fn binary_value(
        &self,
        a: usize,
        b: usize,
        f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
    ) -> Array2<f64> {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    /// Gradients of `sum(output)` with respect to each entry of `wrt`.
    ///
    /// The returned nodes are recorded on this tape and can be
    /// differentiated again. An input that `output` does not depend on gets
    /// a zero constant of its own shape.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        let out = output.id;
        let n = out + 1;
        let Some(start) = wrt.iter().map(|v| v.id).filter(|&id| id < n).min() else {
            return wrt
                .iter()
                .map(|v| {
                    let (r, c) = v.shape();
                    self.zeros(r, c)
                })
                .collect();
        };

        let mut depends = vec![false; n];
        for w in wrt {
            if w.id < n {
                depends[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in start..n {
                if !depends[id] {
                    depends[id] = nodes[id]
                        .op
                        .parents()
                        .iter()
                        .flatten()
                        .any(|&p| p >= start && depends[p]);
                }
            }
        }

        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; n];
        if depends[out] {
            let (r, c) = output.shape();
            adjoint[out] = Some(self.constant(Array2::ones((r, c))));
        }
        let mut results: Vec<Option<Var<'t>>> = vec![None; wrt.len()];

        for id in (start..n).rev() {
            if !depends[id] {
                continue;
            }
            let Some(g) = adjoint[id] else { continue };
            for (slot, w) in results.iter_mut().zip(wrt) {
                if w.id == id {
                    *slot = Some(g);
                }
            }
            let op = self.nodes.borrow()[id].op.clone();
            let mut acc = |p: usize, contribution: Var<'t>| {
                if p >= start && depends[p] {
                    adjoint[p] = Some(match adjoint[p] {
                        Some(prev) => prev + contribution,
                        None => contribution,
                    });
                }
            };
            let wants = |p: usize| p >= start && depends[p];
            let v = |p: usize| Var { tape: self, id: p };
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    acc(a, g);
                    acc(b, g);
                }
                Op::Sub(a, b) => {
                    acc(a, g);
                    if wants(b) {
                        acc(b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        acc(a, g * v(b));
                    }
                    if wants(b) {
                        acc(b, g * v(a));
                    }
                }
                Op::Neg(a) => acc(a, -g),
                Op::Scale(a, c) => acc(a, g * c),
                Op::Shift(a) => acc(a, g),
                Op::MatMul { a, b, ta, tb } => {
                    if wants(a) {
                        let da = if ta {
                            v(b).matmul_t(g, tb, true)
                        } else {
                            g.matmul_t(v(b), false, !tb)
                        };
                        acc(a, da);
                    }
                    if wants(b) {
                        let db = if tb {
                            g.matmul_t(v(a), true, ta)
                        } else {
                            v(a).matmul_t(g, !ta, false)
                        };
                        acc(b, db);
                    }
                }
                Op::Unary(a, f, k) => acc(a, g * v(a).unary(f, k + 1)),
                Op::SumAll(a) => {
                    let (r, c) = v(a).shape();
                    acc(a, g.broadcast_scalar(r, c));
                }
                Op::ColSums(a) => {
                    let (r, _) = v(a).shape();
                    acc(a, g.broadcast_rows(r));
                }
                Op::RowSums(a) => {
                    let (_, c) = v(a).shape();
                    acc(a, g.broadcast_cols(c));
                }
                Op::BroadcastRows(a) => acc(a, g.col_sums()),
                Op::BroadcastCols(a) => acc(a, g.row_sums()),
                Op::BroadcastScalar(a) => acc(a, g.sum()),
                Op::SelectRows(a, idx) => {
                    let (r, _) = v(a).shape();
                    acc(a, g.scatter_rows_rc(idx, r));
                }
                Op::ScatterRows(a, idx) => acc(a, g.select_rows_rc(idx)),
                Op::Reshape(a) => {
                    let (r, c) = v(a).shape();
                    acc(a, g.reshape(r, c));
                }
            }
        }

        results
            .into_iter()
            .zip(wrt)
            .map(|(r, w)| {
                r.unwrap_or_else(|| {
                    let (rows, cols) = w.shape();
                    self.zeros(rows, cols)
                })
            })
            .collect()
    }
}

/// A `d × 1` array from a slice.
pub fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Array2<f64>> {
        self.tape.value_of(self.id)
    }

    pub fn to_array(&self) -> Array2<f64> {
        self.value().clone()
    }

    /// The single entry of a `1 × 1` node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on a non-scalar node");
        v[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    fn check_same_shape(&self, other: &Var<'t>, what: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` transposes when the flag is set.
    pub fn matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let value = self.tape.binary_value(self.id, other.id, |a, b| {
            let a = if ta { a.t() } else { a.view() };
            let b = if tb { b.t() } else { b.view() };
            assert_eq!(
                a.ncols(),
                b.nrows(),
                "matmul: inner dimensions {:?} x {:?}",
                a.dim(),
                b.dim()
            );
            a.dot(&b)
        });
        self.tape.push(
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            value,
        )
    }

    /// Transpose, recorded as `selfᵀ · I`.
    pub fn t(self) -> Var<'t> {
        let (r, _) = self.shape();
        let eye = self.tape.constant(Array2::eye(r));
        self.matmul_t(eye, true, false)
    }

    pub fn unary(self, f: Func, order: u8) -> Var<'t> {
        let value = self.tape.unary_value(self.id, |a| a.mapv(|x| f.eval(order, x)));
        self.tape.push(Op::Unary(self.id, f, order), value)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Func::Exp, 0)
    }
    pub fn ln(self) -> Var<'t> {
        self.unary(Func::Ln, 0)
    }
    pub fn sin(self) -> Var<'t> {
        self.unary(Func::Sin, 0)
    }
    pub fn cos(self) -> Var<'t> {
        self.unary(Func::Cos, 0)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Func::Tanh, 0)
    }
    pub fn softplus(self) -> Var<'t> {
        self.unary(Func::Softplus, 0)
    }
    pub fn smooth_relu(self, width: f64) -> Var<'t> {
        self.unary(Func::SmoothRelu(width), 0)
    }
    pub fn relu(self) -> Var<'t> {
        self.unary(Func::Relu, 0)
    }
    pub fn elu(self) -> Var<'t> {
        self.unary(Func::Elu, 0)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Func::Square, 0)
    }
    pub fn recip(self) -> Var<'t> {
        self.unary(Func::Recip, 0)
    }
    pub fn powf(self, e: f64) -> Var<'t> {
        self.unary(Func::Powf(e), 0)
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(self) -> Var<'t> {
        let value = self
            .tape
            .unary_value(self.id, |a| Array2::from_elem((1, 1), a.sum()));
        self.tape.push(Op::SumAll(self.id), value)
    }

    /// Sum down each column: `m × n -> 1 × n`.
    pub fn col_sums(self) -> Var<'t> {
        let value = self
            .tape
            .unary_value(self.id, |a| a.sum_axis(Axis(0)).insert_axis(Axis(0)));
        self.tape.push(Op::ColSums(self.id), value)
    }

    /// Sum along each row: `m × n -> m × 1`.
    pub fn row_sums(self) -> Var<'t> {
        let value = self
            .tape
            .unary_value(self.id, |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)));
        self.tape.push(Op::RowSums(self.id), value)
    }

    /// Mean of all entries.
    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum() * (1.0 / (r * c) as f64)
    }

    /// Repeat a `1 × n` row `m` times.
    pub fn broadcast_rows(self, m: usize) -> Var<'t> {
        let value = self.tape.unary_value(self.id, |a| {
            assert_eq!(a.nrows(), 1, "broadcast_rows expects a row");
            a.broadcast((m, a.ncols())).expect("broadcast").to_owned()
        });
        self.tape.push(Op::BroadcastRows(self.id), value)
    }

    /// Repeat an `m × 1` column `n` times.
    pub fn broadcast_cols(self, n: usize) -> Var<'t> {
        let value = self.tape.unary_value(self.id, |a| {
            assert_eq!(a.ncols(), 1, "broadcast_cols expects a column");
            a.broadcast((a.nrows(), n)).expect("broadcast").to_owned()
        });
        self.tape.push(Op::BroadcastCols(self.id), value)
    }

    pub fn broadcast_scalar(self, m: usize, n: usize) -> Var<'t> {
        let value = self.tape.unary_value(self.id, |a| {
            assert_eq!(a.dim(), (1, 1), "broadcast_scalar expects 1x1");
            Array2::from_elem((m, n), a[[0, 0]])
        });
        self.tape.push(Op::BroadcastScalar(self.id), value)
    }

    /// Multiply every row by a `1 × n` row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let (m, _) = self.shape();
        self * row.broadcast_rows(m)
    }

    pub fn select_rows(self, idx: &[usize]) -> Var<'t> {
        self.select_rows_rc(Rc::from(idx))
    }

    fn select_rows_rc(self, idx: Rc<[usize]>) -> Var<'t> {
        let value = self
            .tape
            .unary_value(self.id, |a| a.select(Axis(0), &idx));
        self.tape.push(Op::SelectRows(self.id, idx), value)
    }

    /// Inverse of `select_rows`: place rows at `idx` in a zero matrix with
    /// `total` rows. Indices must be distinct.
    pub fn scatter_rows(self, idx: &[usize], total: usize) -> Var<'t> {
        self.scatter_rows_rc(Rc::from(idx), total)
    }

    fn scatter_rows_rc(self, idx: Rc<[usize]>, total: usize) -> Var<'t> {
        let value = self.tape.unary_value(self.id, |a| {
            let mut out = Array2::zeros((total, a.ncols()));
            for (k, &i) in idx.iter().enumerate() {
                out.row_mut(i).assign(&a.row(k));
            }
            out
        });
        self.tape.push(Op::ScatterRows(self.id, idx), value)
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let value = self.tape.unary_value(self.id, |a| {
            let flat: Vec<f64> = a.iter().copied().collect();
            Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count")
        });
        self.tape.push(Op::Reshape(self.id), value)
    }

    /// Same value; derivatives do not flow through the result.
    pub fn stop_gradient(self) -> Var<'t> {
        let value = self.to_array();
        self.tape.push(Op::Constant, value)
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.check_same_shape(&rhs, "add");
        let value = self.tape.binary_value(self.id, rhs.id, |a, b| a + b);
        self.tape.push(Op::Add(self.id, rhs.id), value)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.check_same_shape(&rhs, "sub");
        let value = self.tape.binary_value(self.id, rhs.id, |a, b| a - b);
        self.tape.push(Op::Sub(self.id, rhs.id), value)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.check_same_shape(&rhs, "mul");
        let value = self.tape.binary_value(self.id, rhs.id, |a, b| a * b);
        self.tape.push(Op::Mul(self.id, rhs.id), value)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let value = self.tape.unary_value(self.id, |a| -a);
        self.tape.push(Op::Neg(self.id), value)
    }
}

impl<'t> std::ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        let value = self.tape.unary_value(self.id, |a| a * c);
        self.tape.push(Op::Scale(self.id, c), value)
    }
}

impl<'t> std::ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        let value = self.tape.unary_value(self.id, |a| a + c);
        self.tape.push(Op::Shift(self.id), value)
    }
}

impl<'t> std::ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self + (-c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn func_derivatives_match_finite_differences() {
        let funcs = [
            Func::Exp,
            Func::Ln,
            Func::Sin,
            Func::Cos,
            Func::Tanh,
            Func::Softplus,
            Func::SmoothRelu(0.1),
            Func::Elu,
            Func::Square,
            Func::Recip,
            Func::Powf(2.5),
        ];
        for f in funcs {
            for &x in &[0.03, 0.07, 0.3, 1.7] {
                for k in 0..3u8 {
                    let num = fd(|y| f.eval(k, y), x);
                    let ana = f.eval(k + 1, x);
                    assert!(
                        (num - ana).abs() < 1e-5 * (1.0 + ana.abs()),
                        "{f:?} order {k} at {x}: {num} vs {ana}"
                    );
                }
            }
        }
    }

    #[test]
    fn smooth_relu_is_c2_at_knots() {
        let w = 0.1;
        for knot in [0.0, 0.05, 0.1] {
            for k in 0..3u8 {
                let l = smooth_relu(k, w, knot - 1e-12);
                let r = smooth_relu(k, w, knot + 1e-12);
                assert!((l - r).abs() < 1e-9, "order {k} jump at {knot}");
            }
        }
    }

    #[test]
    fn grad_of_product_and_sum() {
        let tape = Tape::new();
        let x = tape.var(array![[1.0, 2.0], [3.0, 4.0]]);
        let y = (x * x).sum();
        let g = tape.grad(y, &[x])[0];
        assert_eq!(g.to_array(), array![[2.0, 4.0], [6.0, 8.0]]);
    }

    #[test]
    fn matmul_gradients_all_transpose_flags() {
        let a0 = array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]];
        let b0 = array![[0.2, 1.5], [-0.4, 0.9], [2.0, -0.3]];
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a_in = if ta { a0.t().to_owned() } else { a0.clone() };
            let b_in = if tb { b0.t().to_owned() } else { b0.clone() };
            let tape = Tape::new();
            let a = tape.var(a_in.clone());
            let b = tape.var(b_in.clone());
            let c = a.matmul_t(b, ta, tb);
            let w = tape.constant(array![[1.0, 2.0], [3.0, -1.0]]);
            let loss = (c * w).sum();
            let grads = tape.grad(loss, &[a, b]);
            // finite differences on each entry
            let f = |aa: &Array2<f64>, bb: &Array2<f64>| {
                let aa = if ta { aa.t().to_owned() } else { aa.clone() };
                let bb = if tb { bb.t().to_owned() } else { bb.clone() };
                (aa.dot(&bb) * &array![[1.0, 2.0], [3.0, -1.0]]).sum()
            };
            for ((i, j), &g) in grads[0].to_array().indexed_iter() {
                let mut p = a_in.clone();
                p[[i, j]] += 1e-6;
                let mut m = a_in.clone();
                m[[i, j]] -= 1e-6;
                let num = (f(&p, &b_in) - f(&m, &b_in)) / 2e-6;
                assert!((num - g).abs() < 1e-6);
            }
            for ((i, j), &g) in grads[1].to_array().indexed_iter() {
                let mut p = b_in.clone();
                p[[i, j]] += 1e-6;
                let mut m = b_in.clone();
                m[[i, j]] -= 1e-6;
                let num = (f(&a_in, &p) - f(&a_in, &m)) / 2e-6;
                assert!((num - g).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn second_order_through_grad() {
        // f(x) = x^3 summed; d/dx of (df/dx · v) = 6 x v
        let tape = Tape::new();
        let x = tape.var(array![[2.0], [-1.0]]);
        let f = (x * x * x).sum();
        let g = tape.grad(f, &[x])[0];
        let v = tape.constant(array![[1.0], [3.0]]);
        let hv = tape.grad((g * v).sum(), &[x])[0];
        assert_eq!(hv.to_array(), array![[12.0], [-18.0]]);
    }

    #[test]
    fn independent_input_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(array![[1.0]]);
        let y = tape.var(array![[5.0, 6.0]]);
        let out = (x * x).sum();
        let g = tape.grad(out, &[y]);
        assert_eq!(g[0].to_array(), array![[0.0, 0.0]]);
    }

    #[test]
    fn select_scatter_reshape_roundtrip_gradients() {
        let tape = Tape::new();
        let x = tape.var(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let s = x.select_rows(&[2, 0]).reshape(1, 4).square().sum();
        let g = tape.grad(s, &[x])[0].to_array();
        assert_eq!(g, array![[2.0, 4.0], [0.0, 0.0], [10.0, 12.0]]);
        let sc = x.select_rows(&[1]).scatter_rows(&[0], 2);
        assert_eq!(sc.to_array(), array![[3.0, 4.0], [0.0, 0.0]]);
    }

    #[test]
    fn broadcasts_and_reductions() {
        let tape = Tape::new();
        let r = tape.var(array![[1.0, 2.0]]);
        let c = tape.var(array![[3.0], [4.0], [5.0]]);
        let m = r.broadcast_rows(3) * c.broadcast_cols(2);
        assert_eq!(m.col_sums().to_array(), array![[12.0, 24.0]]);
        assert_eq!(m.row_sums().to_array(), array![[9.0], [12.0], [15.0]]);
        let g = tape.grad(m.sum(), &[r, c]);
        assert_eq!(g[0].to_array(), array![[12.0, 12.0]]);
        assert_eq!(g[1].to_array(), array![[3.0], [3.0], [3.0]]);
    }
}
