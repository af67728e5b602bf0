//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value is an `Array2<f64>`; row vectors are `1×d` and scalars `1×1`.
//! A [`Tape`] records each operation as it is evaluated, and
//! [`Tape::backward`] walks the record in reverse to accumulate gradients.
//!
//! Parameters live outside the tape as [`Param`]s. Binding a parameter with
//! [`Tape::param`] creates (or reuses) a leaf for it, and the resulting
//! [`Gradients`] can be queried by parameter. Binding the same parameter twice
//! on one tape yields the same leaf, so a module shared between two forward
//! paths accumulates both contributions.
//!
//! Only first derivatives are taken. Quantities that need a derivative inside
//! the forward pass (the critic's input gradient) are written out as ordinary
//! tape operations, and then differentiated once more like anything else.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Axis, Zip};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

/// A learnable matrix with a stable identity.
///
/// Clones share the identity of the original, which is what lets a snapshot
/// of a model be evaluated in place of it.
#[derive(Debug, Clone)]
pub struct Param {
    id: ParamId,
    pub value: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        Self {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    LogSigmoid(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    NormalizeRows(usize),
    RowNorms(usize),
    RowSums(usize),
    MeanRows(usize),
    SumAll(usize),
    Transpose(usize),
    Gather(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    fn push(&self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives gradients but is not tied to a [`Param`].
    pub fn input(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&self, param: &Param) -> Var<'_> {
        if let Some(&id) = self.bound.borrow().get(&param.id) {
            return Var { tape: self, id };
        }
        let var = self.input(param.value.clone());
        self.bound.borrow_mut().insert(param.id, var.id);
        var
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Array2<f64>> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Array2<f64>) -> Array2<f64>) -> Var<'_> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value), nodes[a].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
    ) -> Var<'_> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                f(&nodes[a].value, &nodes[b].value),
                nodes[a].requires_grad || nodes[b].requires_grad,
            )
        };
        self.push(value, op, rg)
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.dim(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(Array2::ones((1, 1)));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let rg = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, &g * val(*b));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, &g * val(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if rg(*row) {
                        accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulCol(a, col) => {
                    if rg(*col) {
                        let gc = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads, *col, gc);
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, &g * val(*col));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(val(*a))
                        .for_each(|g, &x| *g *= sigmoid(-x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, y * &(&g - &dot));
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, &g - &(p * &total));
                }
                Op::NormalizeRows(a) => {
                    let y = &node.value;
                    let norms = row_norms(val(*a));
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut ga = &g - &(y * &dot);
                    Zip::from(ga.rows_mut())
                        .and(&norms)
                        .for_each(|mut r, &n| r /= n);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNorms(a) => {
                    let x = val(*a);
                    let mut ga = x.clone();
                    Zip::from(ga.rows_mut())
                        .and(node.value.column(0))
                        .and(g.column(0))
                        .for_each(|mut r, &n, &gn| {
                            if n > 0.0 {
                                r *= gn / n;
                            } else {
                                r.fill(0.0);
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSums(a) => {
                    let shape = val(*a).dim();
                    let ga = g
                        .broadcast(shape)
                        .expect("row-sum gradient broadcast")
                        .to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let shape = val(*a).dim();
                    let ga = g
                        .broadcast(shape)
                        .expect("mean gradient broadcast")
                        .to_owned()
                        / shape.0 as f64;
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(val(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Gather(a, rows) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = val(p).nrows();
                        if rg(p) {
                            let gp = g.slice(ndarray::s![start..start + n, ..]).to_owned();
                            accumulate(&mut grads, p, gp);
                        }
                        start += n;
                    }
                }
            }
        }

        Gradients {
            grads,
            bound: self.bound.borrow().clone(),
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn row_norms(x: &Array2<f64>) -> ndarray::Array1<f64> {
    x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    bound: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Array2<f64>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a bound parameter; `None` if the parameter was never bound
    /// or did not influence the output.
    pub fn param(&self, param: &Param) -> Option<&Array2<f64>> {
        let id = *self.bound.get(&param.id)?;
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Array2<f64> {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_of(self.id).dim()
    }

    /// The `[0, 0]` entry; intended for `1×1` values.
    pub fn scalar(&self) -> f64 {
        self.tape.value_of(self.id)[[0, 0]]
    }

    /// A constant copy cut off from the gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::MatMul(self.id, rhs.id), |a, b| a.dot(b))
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    /// Adds a `1×m` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, row.id, Op::AddRow(self.id, row.id), |a, r| a + r)
    }

    /// Multiplies row `i` by entry `i` of an `n×1` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, col.id, Op::MulCol(self.id, col.id), |a, c| a * c)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |a| a + c)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Relu(self.id), |a| a.mapv(|v| v.max(0.0)))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Tanh(self.id), |a| a.mapv(f64::tanh))
    }

    pub fn log_sigmoid(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::LogSigmoid(self.id), |a| a.mapv(log_sigmoid))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::SoftmaxRows(self.id), softmax_rows)
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::LogSoftmaxRows(self.id), log_softmax_rows)
    }

    /// Scales each row to unit Euclidean norm. Rows must be nonzero.
    pub fn normalize_rows(self) -> Var<'t> {
        self.tape.unary(self.id, Op::NormalizeRows(self.id), |a| {
            let norms = row_norms(a);
            let mut out = a.clone();
            Zip::from(out.rows_mut())
                .and(&norms)
                .for_each(|mut r, &n| r /= n);
            out
        })
    }

    /// Euclidean norm of each row, as an `n×1` column.
    pub fn row_norms(self) -> Var<'t> {
        self.tape.unary(self.id, Op::RowNorms(self.id), |a| {
            row_norms(a).insert_axis(Axis(1))
        })
    }

    /// Sum of each row, as an `n×1` column.
    pub fn row_sums(self) -> Var<'t> {
        self.tape.unary(self.id, Op::RowSums(self.id), |a| {
            a.sum_axis(Axis(1)).insert_axis(Axis(1))
        })
    }

    /// Column-wise mean, as a `1×m` row.
    pub fn mean_rows(self) -> Var<'t> {
        self.tape.unary(self.id, Op::MeanRows(self.id), |a| {
            a.mean_axis(Axis(0))
                .expect("mean over zero rows")
                .insert_axis(Axis(0))
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumAll(self.id), |a| {
            Array2::from_elem((1, 1), a.sum())
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = {
            let (r, c) = self.shape();
            (r * c) as f64
        };
        self.sum().scale(1.0 / n)
    }

    pub fn t(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Transpose(self.id), |a| a.t().to_owned())
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather(self, rows: &[usize]) -> Var<'t> {
        let idx = rows.to_vec();
        self.tape
            .unary(self.id, Op::Gather(self.id, idx.clone()), |a| {
                a.select(Axis(0), &idx)
            })
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts.first().expect("concat of zero parts").tape;
        let (value, rg) = {
            let nodes = tape.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            (value, rg)
        };
        tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg)
    }
}
