//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] is an append-only record of operations; [`Var`] is a cheap
//! handle into it. Construction order is topological by definition, so
//! [`Tape::backward`] replays the record once in reverse and accumulates
//! every gradient deterministically. Records are meant to be rebuilt per
//! training step rather than reused.
//!
//! Supported shapes are scalars, vectors and matrices; elementwise ops
//! broadcast a scalar against anything, nothing more.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TapeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("domain error: {0}")]
    DomainError(&'static str),
    #[error("reduction over an empty axis")]
    EmptyAxis,
    #[error("backward requires a scalar root")]
    NonScalarRoot,
    #[error("backward already ran on this record")]
    DoubleBackward,
    #[error("gradients not available before backward")]
    NoGradients,
    #[error("gather index out of bounds")]
    IndexOutOfBounds,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    /// log(-x) for x <= 0; the log-domain weight of a nonpositive quantity.
    LogNeg,
    Tanh,
    Sigmoid,
    Square,
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    LogAddExp,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
    Scale(usize, f64),
    Row(usize, usize),
    FlattenRows(usize, usize, usize),
    Gather(usize, Vec<usize>),
    Slice(usize, usize),
    Concat(Vec<usize>),
    MatMul(usize, usize),
    MatVec(usize, usize),
    Sum(usize),
    Mean(usize),
    LogSumExp(usize),
    LogSumExpAxis(usize, u8),
    Softmax(usize),
    LogSoftmax(usize),
}

struct Node {
    op: Op,
    shape: Shape,
    values: Vec<f64>,
}

/// The computation record.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Vec<f64>>>,
    done: Cell<bool>,
}

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            done: Cell::new(false),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, op: Op, shape: Shape, values: Vec<f64>) -> Var<'_> {
        debug_assert_eq!(shape.len(), values.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, shape, values });
        Var { tape: self, id }
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(Op::Leaf, Shape::Scalar, vec![v])
    }

    pub fn vector(&self, v: &[f64]) -> Var<'_> {
        self.push(Op::Leaf, Shape::Vector(v.len()), v.to_vec())
    }

    pub fn matrix(&self, rows: usize, cols: usize, data: &[f64]) -> Var<'_> {
        assert_eq!(rows * cols, data.len(), "matrix leaf data length mismatch");
        self.push(Op::Leaf, Shape::Matrix(rows, cols), data.to_vec())
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::ShapeMismatch("concat of zero vectors"));
        }
        let mut values = Vec::new();
        let mut ids = Vec::with_capacity(parts.len());
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                match nodes[p.id].shape {
                    Shape::Vector(_) | Shape::Scalar => values.extend_from_slice(&nodes[p.id].values),
                    Shape::Matrix(..) => {
                        return Err(TapeError::ShapeMismatch("concat expects vectors"))
                    }
                }
                ids.push(p.id);
            }
        }
        let n = values.len();
        Ok(self.push(Op::Concat(ids), Shape::Vector(n), values))
    }

    /// Populate gradients of every node with d(root)/d(node).
    pub fn backward(&self, root: Var<'_>) -> Result<(), TapeError> {
        if self.done.get() {
            return Err(TapeError::DoubleBackward);
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].shape != Shape::Scalar {
            return Err(TapeError::NonScalarRoot);
        }
        let mut grads: Vec<Vec<f64>> = nodes.iter().map(|n| vec![0.0; n.shape.len()]).collect();
        grads[root.id][0] = 1.0;

        for id in (0..nodes.len()).rev() {
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Unary(kind, a) => {
                    let (ga, rest) = split_two(&mut grads, *a, id);
                    let g = &rest[0];
                    let xv = &nodes[*a].values;
                    let yv = &node.values;
                    match kind {
                        UnaryKind::Neg => accumulate(ga, g, |_, gi| -gi),
                        UnaryKind::Exp => accumulate(ga, g, |i, gi| gi * yv[i]),
                        UnaryKind::Log => accumulate(ga, g, |i, gi| gi / xv[i]),
                        UnaryKind::LogNeg => accumulate(ga, g, |i, gi| gi / xv[i]),
                        UnaryKind::Tanh => accumulate(ga, g, |i, gi| gi * (1.0 - yv[i] * yv[i])),
                        UnaryKind::Sigmoid => {
                            accumulate(ga, g, |i, gi| gi * yv[i] * (1.0 - yv[i]))
                        }
                        UnaryKind::Square => accumulate(ga, g, |i, gi| gi * 2.0 * xv[i]),
                    }
                }
                Op::Binary(kind, a, b) => {
                    let g = grads[id].clone();
                    let av = &nodes[*a].values;
                    let bv = &nodes[*b].values;
                    let yv = &node.values;
                    let a_scalar = av.len() == 1 && yv.len() > 1;
                    let b_scalar = bv.len() == 1 && yv.len() > 1;
                    for (i, &gi) in g.iter().enumerate() {
                        if gi == 0.0 {
                            continue;
                        }
                        let ai = if a_scalar { 0 } else { i };
                        let bi = if b_scalar { 0 } else { i };
                        let (da, db) = match kind {
                            BinaryKind::Add => (gi, gi),
                            BinaryKind::Sub => (gi, -gi),
                            BinaryKind::Mul => (gi * bv[bi], gi * av[ai]),
                            BinaryKind::LogAddExp => {
                                if yv[i] == f64::NEG_INFINITY {
                                    continue;
                                }
                                (gi * math::exp(av[ai] - yv[i]), gi * math::exp(bv[bi] - yv[i]))
                            }
                            BinaryKind::Max => {
                                if av[ai] >= bv[bi] {
                                    (gi, 0.0)
                                } else {
                                    (0.0, gi)
                                }
                            }
                        };
                        grads[*a][ai] += da;
                        grads[*b][bi] += db;
                    }
                }
                Op::Scale(a, factor) => {
                    let (ga, rest) = split_two(&mut grads, *a, id);
                    let g = &rest[0];
                    let f = *factor;
                    accumulate(ga, g, |_, gi| gi * f);
                }
                Op::Row(a, r) => {
                    let cols = node.shape.len();
                    let g = grads[id].clone();
                    let dst = &mut grads[*a][r * cols..(r + 1) * cols];
                    for (d, gi) in dst.iter_mut().zip(g.iter()) {
                        *d += gi;
                    }
                }
                Op::FlattenRows(a, r0, _r1) => {
                    let cols = match nodes[*a].shape {
                        Shape::Matrix(_, c) => c,
                        _ => unreachable!(),
                    };
                    let g = grads[id].clone();
                    let dst = &mut grads[*a][r0 * cols..r0 * cols + g.len()];
                    for (d, gi) in dst.iter_mut().zip(g.iter()) {
                        *d += gi;
                    }
                }
                Op::Gather(a, idx) => {
                    let g = grads[id].clone();
                    for (j, &src) in idx.iter().enumerate() {
                        grads[*a][src] += g[j];
                    }
                }
                Op::Slice(a, start) => {
                    let g = grads[id].clone();
                    let dst = &mut grads[*a][*start..start + g.len()];
                    for (d, gi) in dst.iter_mut().zip(g.iter()) {
                        *d += gi;
                    }
                }
                Op::Concat(parts) => {
                    let g = grads[id].clone();
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p].shape.len();
                        let dst = &mut grads[p];
                        for (d, gi) in dst.iter_mut().zip(g[off..off + n].iter()) {
                            *d += gi;
                        }
                        off += n;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ar, ac) = dims(nodes[*a].shape);
                    let (_, bc) = dims(nodes[*b].shape);
                    let g = grads[id].clone();
                    let av = nodes[*a].values.clone();
                    let bv = nodes[*b].values.clone();
                    // dA = g . B^T ; dB = A^T . g
                    for i in 0..ar {
                        for k in 0..bc {
                            let gik = g[i * bc + k];
                            if gik == 0.0 {
                                continue;
                            }
                            for j in 0..ac {
                                grads[*a][i * ac + j] += gik * bv[j * bc + k];
                                grads[*b][j * bc + k] += av[i * ac + j] * gik;
                            }
                        }
                    }
                }
                Op::MatVec(a, x) => {
                    let (ar, ac) = dims(nodes[*a].shape);
                    let g = grads[id].clone();
                    let av = nodes[*a].values.clone();
                    let xv = nodes[*x].values.clone();
                    for i in 0..ar {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..ac {
                            grads[*a][i * ac + j] += gi * xv[j];
                            grads[*x][j] += gi * av[i * ac + j];
                        }
                    }
                }
                Op::Sum(a) => {
                    let g = grads[id][0];
                    if g != 0.0 {
                        for d in grads[*a].iter_mut() {
                            *d += g;
                        }
                    }
                }
                Op::Mean(a) => {
                    let n = nodes[*a].shape.len() as f64;
                    let g = grads[id][0] / n;
                    if g != 0.0 {
                        for d in grads[*a].iter_mut() {
                            *d += g;
                        }
                    }
                }
                Op::LogSumExp(a) => {
                    let g = grads[id][0];
                    let out = node.values[0];
                    if g != 0.0 && out != f64::NEG_INFINITY {
                        let xv = nodes[*a].values.clone();
                        for (d, &x) in grads[*a].iter_mut().zip(xv.iter()) {
                            *d += g * math::exp(x - out);
                        }
                    }
                }
                Op::LogSumExpAxis(a, axis) => {
                    let (r, c) = dims(nodes[*a].shape);
                    let g = grads[id].clone();
                    let xv = nodes[*a].values.clone();
                    let out = node.values.clone();
                    if *axis == 0 {
                        for j in 0..c {
                            if g[j] == 0.0 || out[j] == f64::NEG_INFINITY {
                                continue;
                            }
                            for i in 0..r {
                                grads[*a][i * c + j] += g[j] * math::exp(xv[i * c + j] - out[j]);
                            }
                        }
                    } else {
                        for i in 0..r {
                            if g[i] == 0.0 || out[i] == f64::NEG_INFINITY {
                                continue;
                            }
                            for j in 0..c {
                                grads[*a][i * c + j] += g[i] * math::exp(xv[i * c + j] - out[i]);
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let g = grads[id].clone();
                    let yv = node.values.clone();
                    let dot: f64 = g.iter().zip(yv.iter()).map(|(gi, yi)| gi * yi).sum();
                    for (d, (&gi, &yi)) in grads[*a].iter_mut().zip(g.iter().zip(yv.iter())) {
                        *d += yi * (gi - dot);
                    }
                }
                Op::LogSoftmax(a) => {
                    let g = grads[id].clone();
                    let yv = node.values.clone();
                    let gsum: f64 = g.iter().sum();
                    for (d, (&gi, &yi)) in grads[*a].iter_mut().zip(g.iter().zip(yv.iter())) {
                        *d += gi - math::exp(yi) * gsum;
                    }
                }
            }
        }

        drop(nodes);
        *self.grads.borrow_mut() = grads;
        self.done.set(true);
        Ok(())
    }

    /// Forget gradients so a fresh backward pass may run on the same record.
    pub fn reset_gradients(&self) {
        self.grads.borrow_mut().clear();
        self.done.set(false);
    }
}

fn dims(shape: Shape) -> (usize, usize) {
    match shape {
        Shape::Matrix(r, c) => (r, c),
        Shape::Vector(n) => (1, n),
        Shape::Scalar => (1, 1),
    }
}

/// Borrow grads[a] mutably together with grads[out] immutably (a < out always).
fn split_two<'g>(grads: &'g mut [Vec<f64>], a: usize, out: usize) -> (&'g mut [f64], &'g [Vec<f64>]) {
    debug_assert!(a < out);
    let (lo, hi) = grads.split_at_mut(out);
    (&mut lo[a], &hi[..1])
}

fn accumulate(dst: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (i, (d, &gi)) in dst.iter_mut().zip(g.iter()).enumerate() {
        if gi != 0.0 {
            *d += f(i, gi);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].shape
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].values.clone()
    }

    /// Value of a scalar node.
    pub fn value(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        debug_assert_eq!(nodes[self.id].shape, Shape::Scalar);
        nodes[self.id].values[0]
    }

    /// Gradient accumulated by [`Tape::backward`].
    pub fn grad(&self) -> Result<Vec<f64>, TapeError> {
        if !self.tape.done.get() {
            return Err(TapeError::NoGradients);
        }
        Ok(self.tape.grads.borrow()[self.id].clone())
    }

    fn unary(self, kind: UnaryKind) -> Result<Var<'t>, TapeError> {
        let (shape, values) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let mut out = Vec::with_capacity(n.values.len());
            for &x in &n.values {
                out.push(match kind {
                    UnaryKind::Neg => -x,
                    UnaryKind::Exp => math::exp(x),
                    UnaryKind::Log => {
                        if x <= 0.0 {
                            return Err(TapeError::DomainError("log of non-positive value"));
                        }
                        math::ln(x)
                    }
                    UnaryKind::LogNeg => {
                        if x > 0.0 {
                            return Err(TapeError::DomainError("log_neg of positive value"));
                        }
                        if x == 0.0 {
                            f64::NEG_INFINITY
                        } else {
                            math::ln(-x)
                        }
                    }
                    UnaryKind::Tanh => math::tanh(x),
                    UnaryKind::Sigmoid => math::sigmoid(x),
                    UnaryKind::Square => x * x,
                });
            }
            (n.shape, out)
        };
        Ok(self.tape.push(Op::Unary(kind, self.id), shape, values))
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>, TapeError> {
        let (shape, values) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let shape = if a.shape == b.shape {
                a.shape
            } else if a.shape == Shape::Scalar {
                b.shape
            } else if b.shape == Shape::Scalar {
                a.shape
            } else {
                return Err(TapeError::ShapeMismatch("elementwise operands"));
            };
            let n = shape.len();
            let a_scalar = a.values.len() == 1 && n > 1;
            let b_scalar = b.values.len() == 1 && n > 1;
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let x = a.values[if a_scalar { 0 } else { i }];
                let y = b.values[if b_scalar { 0 } else { i }];
                out.push(match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::LogAddExp => math::log_add_exp(x, y),
                    BinaryKind::Max => {
                        if x >= y {
                            x
                        } else {
                            y
                        }
                    }
                });
            }
            (shape, out)
        };
        Ok(self.tape.push(Op::Binary(kind, self.id, other.id), shape, values))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TapeError> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TapeError> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TapeError> {
        self.binary(other, BinaryKind::Mul)
    }

    /// Elementwise log(e^a + e^b); -inf is the additive identity.
    pub fn log_add_exp(self, other: Var<'t>) -> Result<Var<'t>, TapeError> {
        self.binary(other, BinaryKind::LogAddExp)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn max(self, other: Var<'t>) -> Result<Var<'t>, TapeError> {
        self.binary(other, BinaryKind::Max)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg).expect("neg is total")
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp).expect("exp is total")
    }

    /// Natural log; rejects non-positive inputs rather than emitting NaN.
    pub fn log(self) -> Result<Var<'t>, TapeError> {
        self.unary(UnaryKind::Log)
    }

    /// log(-x) for x <= 0, with log_neg(0) = -inf.
    pub fn log_neg(self) -> Result<Var<'t>, TapeError> {
        self.unary(UnaryKind::LogNeg)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryKind::Tanh).expect("tanh is total")
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid).expect("sigmoid is total")
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square).expect("square is total")
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let (shape, values) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape, n.values.iter().map(|&x| x * factor).collect())
        };
        self.tape.push(Op::Scale(self.id, factor), shape, values)
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(self, r: usize) -> Result<Var<'t>, TapeError> {
        let (cols, values) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let (rows, cols) = match n.shape {
                Shape::Matrix(rr, cc) => (rr, cc),
                _ => return Err(TapeError::ShapeMismatch("row of a non-matrix")),
            };
            if r >= rows {
                return Err(TapeError::IndexOutOfBounds);
            }
            (cols, n.values[r * cols..(r + 1) * cols].to_vec())
        };
        Ok(self.tape.push(Op::Row(self.id, r), Shape::Vector(cols), values))
    }

    /// Rows `r0..r1` of a matrix, flattened row-major into a vector.
    pub fn flatten_rows(self, r0: usize, r1: usize) -> Result<Var<'t>, TapeError> {
        let values = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let (rows, cols) = match n.shape {
                Shape::Matrix(rr, cc) => (rr, cc),
                _ => return Err(TapeError::ShapeMismatch("flatten_rows of a non-matrix")),
            };
            if r0 >= r1 || r1 > rows {
                return Err(TapeError::IndexOutOfBounds);
            }
            n.values[r0 * cols..r1 * cols].to_vec()
        };
        let len = values.len();
        Ok(self
            .tape
            .push(Op::FlattenRows(self.id, r0, r1), Shape::Vector(len), values))
    }

    /// Pick entries of a vector by index; duplicates allowed.
    pub fn gather(self, idx: &[usize]) -> Result<Var<'t>, TapeError> {
        let values = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let len = match n.shape {
                Shape::Vector(len) => len,
                _ => return Err(TapeError::ShapeMismatch("gather from a non-vector")),
            };
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx {
                if i >= len {
                    return Err(TapeError::IndexOutOfBounds);
                }
                out.push(n.values[i]);
            }
            out
        };
        Ok(self
            .tape
            .push(Op::Gather(self.id, idx.to_vec()), Shape::Vector(idx.len()), values))
    }

    /// Contiguous sub-vector `start..end`.
    pub fn slice(self, start: usize, end: usize) -> Result<Var<'t>, TapeError> {
        let values = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let len = match n.shape {
                Shape::Vector(len) => len,
                _ => return Err(TapeError::ShapeMismatch("slice of a non-vector")),
            };
            if start > end || end > len {
                return Err(TapeError::IndexOutOfBounds);
            }
            n.values[start..end].to_vec()
        };
        let n = values.len();
        Ok(self.tape.push(Op::Slice(self.id, start), Shape::Vector(n), values))
    }

    /// (a,b) x (b,c) -> (a,c).
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TapeError> {
        let (shape, values) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let (ar, ac) = match a.shape {
                Shape::Matrix(r, c) => (r, c),
                _ => return Err(TapeError::ShapeMismatch("matmul lhs must be a matrix")),
            };
            let (br, bc) = match b.shape {
                Shape::Matrix(r, c) => (r, c),
                _ => return Err(TapeError::ShapeMismatch("matmul rhs must be a matrix")),
            };
            if ac != br {
                return Err(TapeError::ShapeMismatch("matmul inner dimensions"));
            }
            let mut out = vec![0.0; ar * bc];
            for i in 0..ar {
                for j in 0..ac {
                    let aij = a.values[i * ac + j];
                    if aij == 0.0 {
                        continue;
                    }
                    for k in 0..bc {
                        out[i * bc + k] += aij * b.values[j * bc + k];
                    }
                }
            }
            (Shape::Matrix(ar, bc), out)
        };
        Ok(self.tape.push(Op::MatMul(self.id, other.id), shape, values))
    }

    /// (r,c) x (c) -> (r).
    pub fn matvec(self, x: Var<'t>) -> Result<Var<'t>, TapeError> {
        let (rows, values) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let v = &nodes[x.id];
            let (ar, ac) = match a.shape {
                Shape::Matrix(r, c) => (r, c),
                _ => return Err(TapeError::ShapeMismatch("matvec lhs must be a matrix")),
            };
            match v.shape {
                Shape::Vector(n) if n == ac => {}
                _ => return Err(TapeError::ShapeMismatch("matvec operand sizes")),
            }
            let mut out = Vec::with_capacity(ar);
            for i in 0..ar {
                let mut acc = 0.0;
                for j in 0..ac {
                    acc += a.values[i * ac + j] * v.values[j];
                }
                out.push(acc);
            }
            (ar, out)
        };
        Ok(self.tape.push(Op::MatVec(self.id, x.id), Shape::Vector(rows), values))
    }

    /// reduce_sum over every element.
    pub fn sum(self) -> Var<'t> {
        let total: f64 = self.tape.nodes.borrow()[self.id].values.iter().sum();
        self.tape.push(Op::Sum(self.id), Shape::Scalar, vec![total])
    }

    /// reduce_mean over every element.
    pub fn mean(self) -> Result<Var<'t>, TapeError> {
        let (n, total) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].values;
            (v.len(), v.iter().sum::<f64>())
        };
        if n == 0 {
            return Err(TapeError::EmptyAxis);
        }
        Ok(self
            .tape
            .push(Op::Mean(self.id), Shape::Scalar, vec![total / n as f64]))
    }

    /// Stable log-sum-exp of a vector; lse of all -inf is -inf.
    pub fn log_sum_exp(self) -> Result<Var<'t>, TapeError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            match n.shape {
                Shape::Vector(len) if len > 0 => {}
                Shape::Vector(_) => return Err(TapeError::EmptyAxis),
                _ => return Err(TapeError::ShapeMismatch("log_sum_exp expects a vector")),
            }
            math::log_sum_exp_slice(&n.values)
        };
        Ok(self.tape.push(Op::LogSumExp(self.id), Shape::Scalar, vec![value]))
    }

    /// log-sum-exp over one axis of a matrix (0 = down columns, 1 = across rows).
    pub fn log_sum_exp_axis(self, axis: u8) -> Result<Var<'t>, TapeError> {
        let (out_len, values) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let (r, c) = match n.shape {
                Shape::Matrix(r, c) => (r, c),
                _ => return Err(TapeError::ShapeMismatch("log_sum_exp_axis expects a matrix")),
            };
            if r == 0 || c == 0 {
                return Err(TapeError::EmptyAxis);
            }
            match axis {
                0 => {
                    let mut out = Vec::with_capacity(c);
                    for j in 0..c {
                        let col: Vec<f64> = (0..r).map(|i| n.values[i * c + j]).collect();
                        out.push(math::log_sum_exp_slice(&col));
                    }
                    (c, out)
                }
                1 => {
                    let mut out = Vec::with_capacity(r);
                    for i in 0..r {
                        out.push(math::log_sum_exp_slice(&n.values[i * c..(i + 1) * c]));
                    }
                    (r, out)
                }
                _ => return Err(TapeError::ShapeMismatch("axis must be 0 or 1")),
            }
        };
        Ok(self
            .tape
            .push(Op::LogSumExpAxis(self.id, axis), Shape::Vector(out_len), values))
    }

    pub fn softmax(self) -> Result<Var<'t>, TapeError> {
        let values = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            match n.shape {
                Shape::Vector(len) if len > 0 => {}
                _ => return Err(TapeError::ShapeMismatch("softmax expects a non-empty vector")),
            }
            if n.values.iter().any(|x| !x.is_finite()) {
                return Err(TapeError::DomainError("softmax of non-finite values"));
            }
            let hi = n.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = n.values.iter().map(|&x| math::exp(x - hi)).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect::<Vec<f64>>()
        };
        let n = values.len();
        Ok(self.tape.push(Op::Softmax(self.id), Shape::Vector(n), values))
    }

    /// log_softmax(u)_v = u_v - lse(u).
    pub fn log_softmax(self) -> Result<Var<'t>, TapeError> {
        let values = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            match n.shape {
                Shape::Vector(len) if len > 0 => {}
                _ => {
                    return Err(TapeError::ShapeMismatch("log_softmax expects a non-empty vector"))
                }
            }
            if n.values.iter().any(|x| !x.is_finite()) {
                return Err(TapeError::DomainError("log_softmax of non-finite values"));
            }
            let lse = math::log_sum_exp_slice(&n.values);
            n.values.iter().map(|&x| x - lse).collect::<Vec<f64>>()
        };
        let n = values.len();
        Ok(self.tape.push(Op::LogSoftmax(self.id), Shape::Vector(n), values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_log_identities() {
        let t = Tape::new();
        let x = t.scalar(0.0);
        assert_eq!(x.exp().value(), 1.0);
        let y = t.scalar(1.5);
        let z = y.exp().log().unwrap();
        assert!((z.value() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn square_gradient() {
        let t = Tape::new();
        let x = t.scalar(3.0);
        let y = x.mul(x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(x.grad().unwrap()[0], 6.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let t = Tape::new();
        let x = t.scalar(0.0);
        assert_eq!(x.log().unwrap_err(), TapeError::DomainError("log of non-positive value"));
        let y = t.scalar(-1.0);
        assert!(y.log().is_err());
    }

    #[test]
    fn lse_identities() {
        let t = Tape::new();
        let half = crate::math::ln(0.5);
        let v = t.vector(&[half, half]);
        assert!(v.log_sum_exp().unwrap().value().abs() < 1e-15);

        let w = t.vector(&[f64::NEG_INFINITY, 2.5]);
        assert_eq!(w.log_sum_exp().unwrap().value(), 2.5);

        let big = t.vector(&[1000.0, 1000.0]);
        let out = big.log_sum_exp().unwrap().value();
        assert!((out - (1000.0 + crate::math::ln(2.0))).abs() < 1e-12);

        let empty = t.vector(&[]);
        assert_eq!(empty.log_sum_exp().unwrap_err(), TapeError::EmptyAxis);
    }

    #[test]
    fn softmax_normalizes() {
        let t = Tape::new();
        let v = t.vector(&[0.0, 0.0]);
        let s = v.softmax().unwrap();
        assert_eq!(s.values(), vec![0.5, 0.5]);
        let total: f64 = t.vector(&[0.3, -1.2, 4.0]).softmax().unwrap().values().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_matches_definition() {
        let t = Tape::new();
        let u = t.vector(&[0.3, -1.2, 4.0]);
        let ls = u.log_softmax().unwrap().values();
        let lse = crate::math::log_sum_exp_slice(&[0.3, -1.2, 4.0]);
        for (i, &x) in [0.3, -1.2, 4.0].iter().enumerate() {
            assert!((ls[i] - (x - lse)).abs() < 1e-12);
        }
    }

    #[test]
    fn matvec_linear_gradient() {
        // root = sum(W.x): dW = outer(1, x), dx = col-sums of W.
        let t = Tape::new();
        let w = t.matrix(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = t.vector(&[0.5, -1.0, 2.0]);
        let y = w.matvec(x).unwrap();
        let root = y.sum();
        t.backward(root).unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn non_participating_leaf_has_zero_grad() {
        let t = Tape::new();
        let x = t.scalar(2.0);
        let unused = t.vector(&[1.0, 2.0, 3.0]);
        let y = x.square();
        t.backward(y).unwrap();
        assert_eq!(unused.grad().unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let t = Tape::new();
        let v = t.vector(&[1.0, 2.0]);
        assert_eq!(t.backward(v).unwrap_err(), TapeError::NonScalarRoot);
        let s = v.sum();
        t.backward(s).unwrap();
        assert_eq!(t.backward(s).unwrap_err(), TapeError::DoubleBackward);
        t.reset_gradients();
        t.backward(s).unwrap();
    }

    #[test]
    fn lse_axis_reductions() {
        let t = Tape::new();
        let ln = crate::math::ln;
        let m = t.matrix(2, 2, &[ln(0.25), ln(0.75), ln(0.5), ln(0.5)]);
        let rows = m.log_sum_exp_axis(1).unwrap();
        assert!(rows.values().iter().all(|v| v.abs() < 1e-12));
        let cols = m.log_sum_exp_axis(0).unwrap().values();
        assert!((cols[0] - ln(0.75)).abs() < 1e-12);
        assert!((cols[1] - ln(1.25)).abs() < 1e-12);

        let root = rows.sum();
        t.backward(root).unwrap();
        let g = m.grad().unwrap();
        assert!((g[0] - 0.25).abs() < 1e-12);
        assert!((g[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_reductions_error() {
        let t = Tape::new();
        let v = t.vector(&[]);
        assert_eq!(v.mean().unwrap_err(), TapeError::EmptyAxis);
        let a = t.matrix(2, 2, &[1.0; 4]);
        let b = t.matrix(3, 2, &[1.0; 6]);
        assert!(matches!(a.matmul(b), Err(TapeError::ShapeMismatch(_))));
    }

    #[test]
    fn gather_and_concat_scatter() {
        let t = Tape::new();
        let v = t.vector(&[1.0, 2.0, 3.0]);
        let g = v.gather(&[2, 0, 2]).unwrap();
        assert_eq!(g.values(), vec![3.0, 1.0, 3.0]);
        let s = t.concat(&[g, v.slice(1, 2).unwrap()]).unwrap();
        let root = s.sum();
        t.backward(root).unwrap();
        assert_eq!(v.grad().unwrap(), vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn neg_inf_masks_do_not_poison_gradients() {
        let t = Tape::new();
        let x = t.vector(&[0.5, -0.25]);
        let mask = t.vector(&[f64::NEG_INFINITY, f64::NEG_INFINITY]);
        let dead = x.add(mask).unwrap(); // -inf everywhere
        let alive = x.log_add_exp(dead).unwrap(); // equals x
        let root = alive.sum();
        t.backward(root).unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![1.0, 1.0]);
    }
}
