//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every node holds a dense `f64` matrix; scalars are `1 x 1` matrices. The
//! operand indices of a node always precede it, so the tape is topologically
//! ordered by construction and a single reverse sweep visits every node after
//! all of its consumers.
//!
//! Two sweeps are available:
//!
//! * [`Tape::backward`] accumulates plain numeric adjoints.
//! * [`Tape::backward_as_vars`] records the adjoint computation itself as new
//!   tape nodes. The returned gradients are ordinary [`Var`]s, so an
//!   expression built from them can be differentiated again. This is how
//!   losses that contain input derivatives are differentiated with respect to
//!   the parameters.
//!
//! Both sweeps only propagate into nodes that depend on one of the requested
//! seeds. Constant data (regressor matrices, measured outputs) therefore costs
//! nothing on the way back.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, ArrayView2, Zip};
use thiserror::Error;

/// Dense value stored at a tape node.
pub type Tensor = Array2<f64>;

/// Magnitudes below this are rejected as divisors.
pub const DIV_EPS: f64 = 1e-300;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value supplied as a tape leaf")]
    NonFinite,
    #[error("variable from tape {found} used on tape {expected}")]
    ForeignVar { expected: u64, found: u64 },
    #[error("variable index {0} is not on this tape")]
    InvalidIndex(usize),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("division by zero (|divisor| < {DIV_EPS:e})")]
    DivByZero,
    #[error("concatenation of zero operands")]
    EmptyConcat,
    #[error("replayed value differs from stored value at node {0}")]
    ReplayMismatch(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Neg,
    Square,
    Exp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Arith(ArithKind, usize, usize),
    Unary(UnaryKind, usize),
    Scale(usize, f64),
    /// `op(a) * op(b)` where `op` optionally transposes.
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    /// Replicate rows and/or columns of the operand up to the node shape.
    Broadcast(usize),
    /// Sum rows and/or columns of the operand down to the node shape.
    SumTo(usize),
    /// Window of the operand starting at `(row, col)` with the node shape.
    Slice { src: usize, row: usize, col: usize },
    /// Operand embedded into zeros at `(row, col)`.
    Pad { src: usize, row: usize, col: usize },
    ConcatCols(Vec<usize>),
    /// `g * (1 - y^2)`: the tanh adjoint with `y` the tanh output.
    TanhGrad(usize, usize),
    /// Zeros of the node shape with each `(operand, row, col)` added into its
    /// window; windows may overlap.
    SumAt(Vec<(usize, usize, usize)>),
}

impl Op {
    fn operands(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Arith(_, a, b) | Op::TanhGrad(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::SumAt(parts) => parts.iter().map(|p| p.0).collect(),
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Broadcast(a)
            | Op::SumTo(a)
            | Op::Slice { src: a, .. }
            | Op::Pad { src: a, .. } => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a computation.
///
/// A tape is single-threaded while recording but is `Send`, so independent
/// tapes can live on independent threads.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>, ta: bool, tb: bool) -> Tensor {
    let a = if ta { a.reversed_axes() } else { a };
    let b = if tb { b.reversed_axes() } else { b };
    a.dot(&b)
}

/// Owned copy of a view, row by row; much faster than `to_owned` for the
/// column windows and broadcasts used here.
fn owned(v: ArrayView2<f64>) -> Tensor {
    let (r, c) = v.dim();
    let mut data = Vec::with_capacity(r * c);
    for row in v.rows() {
        match row.as_slice() {
            Some(x) => data.extend_from_slice(x),
            None => data.extend(row.iter().copied()),
        }
    }
    Array2::from_shape_vec((r, c), data).expect("length matches shape")
}

fn broadcast_to(a: &Tensor, shape: (usize, usize)) -> Tensor {
    owned(
        a.broadcast(shape)
            .expect("broadcast shape validated at record time"),
    )
}

fn sum_to(a: &Tensor, shape: (usize, usize)) -> Tensor {
    use ndarray::Axis;
    let (r, c) = a.dim();
    let rows = shape.0 == 1 && r != 1;
    let cols = shape.1 == 1 && c != 1;
    match (rows, cols) {
        (false, false) => a.clone(),
        (true, false) => a.sum_axis(Axis(0)).insert_axis(Axis(0)),
        (false, true) => a.sum_axis(Axis(1)).insert_axis(Axis(1)),
        (true, true) => a.sum_axis(Axis(0)).sum_axis(Axis(0)).into_shape_with_order((1, 1)).expect("scalar"),
    }
}

fn broadcast_compatible(small: (usize, usize), big: (usize, usize)) -> bool {
    (small.0 == big.0 || small.0 == 1) && (small.1 == big.1 || small.1 == 1)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Vars recorded before the clear become foreign.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(AutodiffError::ForeignVar {
                expected: self.id,
                found: v.tape,
            });
        }
        if v.index >= self.nodes.len() {
            return Err(AutodiffError::InvalidIndex(v.index));
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(self.val(i))
    }

    /// First entry of the node value; the natural accessor for `1 x 1` nodes.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        Ok(self.value(v)?[[0, 0]])
    }

    pub fn shape(&self, v: Var) -> Result<(usize, usize)> {
        Ok(self.value(v)?.dim())
    }

    /// Records a leaf holding `value`. All entries must be finite.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFinite);
        }
        Ok(self.push(Op::Leaf, value))
    }

    /// Records a scalar leaf.
    pub fn lift(&mut self, x: f64) -> Result<Var> {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn arith(&mut self, a: Var, b: Var, kind: ArithKind) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        if va.dim() != vb.dim() {
            return Err(AutodiffError::Shape {
                op: "arith",
                lhs: va.dim(),
                rhs: vb.dim(),
            });
        }
        if kind == ArithKind::Div && vb.iter().any(|x| x.abs() < DIV_EPS) {
            return Err(AutodiffError::DivByZero);
        }
        let op = Op::Arith(kind, ia, ib);
        let value = self.eval(&op, va.dim());
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.arith(a, b, ArithKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.arith(a, b, ArithKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.arith(a, b, ArithKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.arith(a, b, ArithKind::Div)
    }

    pub fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var> {
        let ia = self.check(a)?;
        let op = Op::Unary(kind, ia);
        let value = self.eval(&op, self.val(ia).dim());
        Ok(self.push(op, value))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Tanh)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Neg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Square)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Exp)
    }

    /// Multiplication by a constant that is not itself differentiated.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let op = Op::Scale(ia, c);
        let value = self.eval(&op, self.val(ia).dim());
        Ok(self.push(op, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)`, where `ta`/`tb` select the transpose of each operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ra, ca) = self.val(ia).dim();
        let (rb, cb) = self.val(ib).dim();
        let (ra, ca) = if ta { (ca, ra) } else { (ra, ca) };
        let (rb, cb) = if tb { (cb, rb) } else { (rb, cb) };
        if ca != rb {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: (ra, ca),
                rhs: (rb, cb),
            });
        }
        let op = Op::MatMul { a: ia, b: ib, ta, tb };
        let value = self.eval(&op, (ra, cb));
        Ok(self.push(op, value))
    }

    /// Replicates a row vector, a column vector or a scalar to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: (usize, usize)) -> Result<Var> {
        let ia = self.check(a)?;
        let dim = self.val(ia).dim();
        if !broadcast_compatible(dim, shape) {
            return Err(AutodiffError::Shape {
                op: "broadcast",
                lhs: dim,
                rhs: shape,
            });
        }
        let op = Op::Broadcast(ia);
        let value = self.eval(&op, shape);
        Ok(self.push(op, value))
    }

    /// Sums over the axes where `shape` has extent one.
    pub fn sum_to(&mut self, a: Var, shape: (usize, usize)) -> Result<Var> {
        let ia = self.check(a)?;
        let dim = self.val(ia).dim();
        if !broadcast_compatible(shape, dim) {
            return Err(AutodiffError::Shape {
                op: "sum_to",
                lhs: dim,
                rhs: shape,
            });
        }
        let op = Op::SumTo(ia);
        let value = self.eval(&op, shape);
        Ok(self.push(op, value))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.sum_to(a, (1, 1))
    }

    pub fn slice(&mut self, a: Var, row: usize, col: usize, shape: (usize, usize)) -> Result<Var> {
        let ia = self.check(a)?;
        let dim = self.val(ia).dim();
        if row + shape.0 > dim.0 || col + shape.1 > dim.1 {
            return Err(AutodiffError::Shape {
                op: "slice",
                lhs: dim,
                rhs: (row + shape.0, col + shape.1),
            });
        }
        let op = Op::Slice { src: ia, row, col };
        let value = self.eval(&op, shape);
        Ok(self.push(op, value))
    }

    pub fn slice_cols(&mut self, a: Var, col: usize, width: usize) -> Result<Var> {
        let rows = self.shape(a)?.0;
        self.slice(a, 0, col, (rows, width))
    }

    /// Embeds `a` into a zero matrix of `shape` at offset `(row, col)`.
    pub fn pad(&mut self, a: Var, row: usize, col: usize, shape: (usize, usize)) -> Result<Var> {
        let ia = self.check(a)?;
        let dim = self.val(ia).dim();
        if row + dim.0 > shape.0 || col + dim.1 > shape.1 {
            return Err(AutodiffError::Shape {
                op: "pad",
                lhs: dim,
                rhs: shape,
            });
        }
        let op = Op::Pad { src: ia, row, col };
        let value = self.eval(&op, shape);
        Ok(self.push(op, value))
    }

    /// Horizontal concatenation of operands with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::EmptyConcat)?;
        let rows = self.shape(first)?.0;
        let mut idx = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for &p in parts {
            let i = self.check(p)?;
            let d = self.val(i).dim();
            if d.0 != rows {
                return Err(AutodiffError::Shape {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: d,
                });
            }
            cols += d.1;
            idx.push(i);
        }
        let op = Op::ConcatCols(idx);
        let value = self.eval(&op, (rows, cols));
        Ok(self.push(op, value))
    }

    /// `g * (1 - y^2)` elementwise; equals the adjoint of `y = tanh(x)`.
    pub fn tanh_grad(&mut self, g: Var, y: Var) -> Result<Var> {
        let (ig, iy) = (self.check(g)?, self.check(y)?);
        let (dg, dy) = (self.val(ig).dim(), self.val(iy).dim());
        if dg != dy {
            return Err(AutodiffError::Shape {
                op: "tanh_grad",
                lhs: dg,
                rhs: dy,
            });
        }
        let op = Op::TanhGrad(ig, iy);
        let value = self.eval(&op, dg);
        Ok(self.push(op, value))
    }

    /// Sum of the operands, each embedded into zeros of `shape` at its own
    /// `(row, col)` offset. A single `pad` is the one-part case.
    pub fn sum_at(&mut self, parts: &[(Var, usize, usize)], shape: (usize, usize)) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyConcat);
        }
        let mut idx = Vec::with_capacity(parts.len());
        for &(v, row, col) in parts {
            let i = self.check(v)?;
            let d = self.val(i).dim();
            if row + d.0 > shape.0 || col + d.1 > shape.1 {
                return Err(AutodiffError::Shape {
                    op: "sum_at",
                    lhs: d,
                    rhs: shape,
                });
            }
            idx.push((i, row, col));
        }
        let op = Op::SumAt(idx);
        let value = self.eval(&op, shape);
        Ok(self.push(op, value))
    }

    /// Computes the value of `op` from the stored operand values.
    fn eval(&self, op: &Op, shape: (usize, usize)) -> Tensor {
        match *op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Arith(kind, a, b) => {
                let (a, b) = (self.val(a), self.val(b));
                match kind {
                    ArithKind::Add => a + b,
                    ArithKind::Sub => a - b,
                    ArithKind::Mul => a * b,
                    ArithKind::Div => a / b,
                }
            }
            Op::Unary(kind, a) => {
                let a = self.val(a);
                match kind {
                    UnaryKind::Tanh => a.mapv(f64::tanh),
                    UnaryKind::Neg => a.mapv(|x| -x),
                    UnaryKind::Square => a.mapv(|x| x * x),
                    UnaryKind::Exp => a.mapv(f64::exp),
                }
            }
            Op::Scale(a, c) => self.val(a) * c,
            Op::MatMul { a, b, ta, tb } => matmul(self.val(a).view(), self.val(b).view(), ta, tb),
            Op::Broadcast(a) => broadcast_to(self.val(a), shape),
            Op::SumTo(a) => sum_to(self.val(a), shape),
            Op::Slice { src, row, col } => owned(self.val(src).slice(s![row..row + shape.0, col..col + shape.1])),
            Op::Pad { src, row, col } => {
                let v = self.val(src);
                let mut out = Array2::zeros(shape);
                out.slice_mut(s![row..row + v.nrows(), col..col + v.ncols()])
                    .assign(v);
                out
            }
            Op::ConcatCols(ref parts) => {
                let mut out = Array2::zeros(shape);
                let mut c = 0;
                for &p in parts {
                    let v = self.val(p);
                    out.slice_mut(s![.., c..c + v.ncols()]).assign(v);
                    c += v.ncols();
                }
                out
            }
            Op::TanhGrad(g, y) => {
                let mut out = self.val(g).clone();
                Zip::from(&mut out)
                    .and(self.val(y))
                    .for_each(|x, &y| *x *= 1.0 - y * y);
                out
            }
            Op::SumAt(ref parts) => {
                let mut out = Array2::zeros(shape);
                for &(p, row, col) in parts {
                    let v = self.val(p);
                    let mut w = out.slice_mut(s![row..row + v.nrows(), col..col + v.ncols()]);
                    w += v;
                }
                out
            }
        }
    }

    /// Recomputes every non-leaf node from its operands and checks that the
    /// stored value is reproduced bit for bit.
    pub fn verify_replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let again = self.eval(&node.op, node.value.dim());
            let same = again
                .iter()
                .zip(node.value.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(AutodiffError::ReplayMismatch(i));
            }
        }
        Ok(())
    }

    /// Marks nodes up to `last` whose value depends on at least one seed.
    fn dependence(&self, seeds: &[usize], last: usize) -> Vec<bool> {
        let mut dep = vec![false; last + 1];
        for &s in seeds {
            if s <= last {
                dep[s] = true;
            }
        }
        for i in 0..=last {
            if !dep[i] {
                dep[i] = self.nodes[i].op.operands().iter().any(|&j| dep[j]);
            }
        }
        dep
    }

    fn check_all(&self, output: Var, seeds: &[Var]) -> Result<(usize, Vec<usize>)> {
        let out = self.check(output)?;
        let idx = seeds
            .iter()
            .map(|&s| self.check(s))
            .collect::<Result<Vec<_>>>()?;
        Ok((out, idx))
    }

    /// Gradient of the sum of `output`'s entries with respect to each seed,
    /// in one reverse sweep. Seeds that do not influence the output receive
    /// zeros.
    pub fn backward(&self, output: Var, seeds: &[Var]) -> Result<Vec<Tensor>> {
        let (out, seed_idx) = self.check_all(output, seeds)?;
        let dep = self.dependence(&seed_idx, out);
        let mut adj: Vec<Option<Tensor>> = vec![None; out + 1];
        let mut grads: Vec<Option<Tensor>> = vec![None; out + 1];
        adj[out] = Some(Array2::ones(self.val(out).dim()));

        fn acc(adj: &mut [Option<Tensor>], dep: &[bool], i: usize, g: Tensor) {
            if !dep[i] {
                return;
            }
            match &mut adj[i] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out).rev() {
            if !dep[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if seed_idx.contains(&i) {
                grads[i] = Some(g.clone());
            }
            // `g` is moved into its last consumer rather than copied
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {}
                Op::Arith(kind, a, b) => match kind {
                    ArithKind::Add => {
                        if dep[a] && dep[b] {
                            acc(&mut adj, &dep, b, g.clone());
                            acc(&mut adj, &dep, a, g);
                        } else if dep[a] {
                            acc(&mut adj, &dep, a, g);
                        } else {
                            acc(&mut adj, &dep, b, g);
                        }
                    }
                    ArithKind::Sub => {
                        if dep[b] {
                            acc(&mut adj, &dep, b, -&g);
                        }
                        acc(&mut adj, &dep, a, g);
                    }
                    ArithKind::Mul => {
                        if dep[a] {
                            acc(&mut adj, &dep, a, &g * self.val(b));
                        }
                        if dep[b] {
                            acc(&mut adj, &dep, b, &g * self.val(a));
                        }
                    }
                    ArithKind::Div => {
                        let vb = self.val(b);
                        if dep[a] {
                            acc(&mut adj, &dep, a, &g / vb);
                        }
                        if dep[b] {
                            let mut gb = &g * &node.value;
                            Zip::from(&mut gb).and(vb).for_each(|x, &d| *x = -*x / d);
                            acc(&mut adj, &dep, b, gb);
                        }
                    }
                },
                Op::Unary(kind, a) => {
                    let mut ga = g;
                    match kind {
                        UnaryKind::Tanh => Zip::from(&mut ga)
                            .and(&node.value)
                            .for_each(|x, &y| *x *= 1.0 - y * y),
                        UnaryKind::Neg => ga.mapv_inplace(|x| -x),
                        UnaryKind::Square => Zip::from(&mut ga)
                            .and(self.val(a))
                            .for_each(|x, &v| *x *= 2.0 * v),
                        UnaryKind::Exp => Zip::from(&mut ga)
                            .and(&node.value)
                            .for_each(|x, &y| *x *= y),
                    }
                    acc(&mut adj, &dep, a, ga);
                }
                Op::Scale(a, c) => acc(&mut adj, &dep, a, &g * c),
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (self.val(a).view(), self.val(b).view());
                    if dep[a] {
                        let ga = if ta {
                            matmul(vb, g.view(), tb, true)
                        } else {
                            matmul(g.view(), vb, false, !tb)
                        };
                        acc(&mut adj, &dep, a, ga);
                    }
                    if dep[b] {
                        let gb = if tb {
                            matmul(g.view(), va, true, ta)
                        } else {
                            matmul(va, g.view(), !ta, false)
                        };
                        acc(&mut adj, &dep, b, gb);
                    }
                }
                Op::Broadcast(a) => acc(&mut adj, &dep, a, sum_to(&g, self.val(a).dim())),
                Op::SumTo(a) => acc(&mut adj, &dep, a, broadcast_to(&g, self.val(a).dim())),
                Op::Slice { src, row, col } => {
                    if dep[src] {
                        let slot = adj[src].get_or_insert_with(|| Array2::zeros(self.val(src).dim()));
                        let mut w = slot.slice_mut(s![row..row + g.nrows(), col..col + g.ncols()]);
                        w += &g;
                    }
                }
                Op::TanhGrad(gi, yi) => {
                    let vy = self.val(yi);
                    if dep[yi] {
                        let mut gy = g.clone();
                        Zip::from(&mut gy)
                            .and(self.val(gi))
                            .and(vy)
                            .for_each(|x, &a, &y| *x *= -2.0 * a * y);
                        acc(&mut adj, &dep, yi, gy);
                    }
                    if dep[gi] {
                        let mut ga = g;
                        Zip::from(&mut ga).and(vy).for_each(|x, &y| *x *= 1.0 - y * y);
                        acc(&mut adj, &dep, gi, ga);
                    }
                }
                Op::SumAt(ref parts) => {
                    for &(p, row, col) in parts {
                        if dep[p] {
                            let (r, c) = self.val(p).dim();
                            acc(&mut adj, &dep, p, owned(g.slice(s![row..row + r, col..col + c])));
                        }
                    }
                }
                Op::Pad { src, row, col } => {
                    let (r, c) = self.val(src).dim();
                    acc(
                        &mut adj,
                        &dep,
                        src,
                        owned(g.slice(s![row..row + r, col..col + c])),
                    );
                }
                Op::ConcatCols(ref parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = self.val(p).ncols();
                        if dep[p] {
                            acc(&mut adj, &dep, p, owned(g.slice(s![.., c..c + w])));
                        }
                        c += w;
                    }
                }
            }
        }

        Ok(seed_idx
            .iter()
            .map(|&s| {
                grads[s]
                    .clone()
                    .unwrap_or_else(|| Array2::zeros(self.val(s).dim()))
            })
            .collect())
    }

    /// Like [`Tape::backward`], but the reverse sweep is recorded on the tape
    /// and each gradient is returned as a differentiable [`Var`].
    pub fn backward_as_vars(&mut self, output: Var, seeds: &[Var]) -> Result<Vec<Var>> {
        let (out, seed_idx) = self.check_all(output, seeds)?;
        let dep = self.dependence(&seed_idx, out);
        let mut adj: Vec<Option<Var>> = vec![None; out + 1];
        // slice adjoints waiting to be summed into their source in one node
        let mut windows: Vec<Vec<(Var, usize, usize)>> = vec![Vec::new(); out + 1];
        let mut grads: Vec<Option<Var>> = vec![None; out + 1];
        let ones = self.leaf(Array2::ones(self.val(out).dim()))?;
        adj[out] = Some(ones);

        for i in (0..=out).rev() {
            if !dep[i] {
                continue;
            }
            if !windows[i].is_empty() {
                let parts = std::mem::take(&mut windows[i]);
                let shape = self.val(i).dim();
                let w = self.sum_at(&parts, shape)?;
                adj[i] = Some(match adj[i] {
                    Some(prev) => self.add(prev, w)?,
                    None => w,
                });
            }
            let Some(g) = adj[i].take() else { continue };
            if seed_idx.contains(&i) {
                grads[i] = Some(g);
            }
            let id = self.id;
            let var = |index| Var { tape: id, index };
            let me = var(i);
            let op = self.nodes[i].op.clone();
            let mut contrib: Vec<(usize, Var)> = Vec::with_capacity(2);
            match op {
                Op::Leaf => {}
                Op::Arith(kind, a, b) => match kind {
                    ArithKind::Add => {
                        contrib.push((a, g));
                        contrib.push((b, g));
                    }
                    ArithKind::Sub => {
                        contrib.push((a, g));
                        if dep[b] {
                            contrib.push((b, self.neg(g)?));
                        }
                    }
                    ArithKind::Mul => {
                        if dep[a] {
                            contrib.push((a, self.mul(g, var(b))?));
                        }
                        if dep[b] {
                            contrib.push((b, self.mul(g, var(a))?));
                        }
                    }
                    ArithKind::Div => {
                        if dep[a] {
                            contrib.push((a, self.div(g, var(b))?));
                        }
                        if dep[b] {
                            let t = self.mul(g, me)?;
                            let t = self.div(t, var(b))?;
                            contrib.push((b, self.neg(t)?));
                        }
                    }
                },
                Op::Unary(kind, a) => {
                    let ga = match kind {
                        UnaryKind::Tanh => self.tanh_grad(g, me)?,
                        UnaryKind::Neg => self.neg(g)?,
                        UnaryKind::Square => {
                            let t = self.mul(g, var(a))?;
                            self.scale(t, 2.0)?
                        }
                        UnaryKind::Exp => self.mul(g, me)?,
                    };
                    contrib.push((a, ga));
                }
                Op::Scale(a, c) => contrib.push((a, self.scale(g, c)?)),
                Op::MatMul { a, b, ta, tb } => {
                    if dep[a] {
                        let ga = if ta {
                            self.matmul_t(var(b), g, tb, true)?
                        } else {
                            self.matmul_t(g, var(b), false, !tb)?
                        };
                        contrib.push((a, ga));
                    }
                    if dep[b] {
                        let gb = if tb {
                            self.matmul_t(g, var(a), true, ta)?
                        } else {
                            self.matmul_t(var(a), g, !ta, false)?
                        };
                        contrib.push((b, gb));
                    }
                }
                Op::Broadcast(a) => {
                    let shape = self.val(a).dim();
                    contrib.push((a, self.sum_to(g, shape)?));
                }
                Op::SumTo(a) => {
                    let shape = self.val(a).dim();
                    contrib.push((a, self.broadcast(g, shape)?));
                }
                Op::Slice { src, row, col } => {
                    if dep[src] {
                        windows[src].push((g, row, col));
                    }
                }
                Op::TanhGrad(gi, yi) => {
                    if dep[gi] {
                        contrib.push((gi, self.tanh_grad(g, var(yi))?));
                    }
                    if dep[yi] {
                        let t = self.mul(g, var(gi))?;
                        let t = self.mul(t, var(yi))?;
                        contrib.push((yi, self.scale(t, -2.0)?));
                    }
                }
                Op::SumAt(parts) => {
                    for (p, row, col) in parts {
                        if dep[p] {
                            let shape = self.val(p).dim();
                            contrib.push((p, self.slice(g, row, col, shape)?));
                        }
                    }
                }
                Op::Pad { src, row, col } => {
                    let shape = self.val(src).dim();
                    contrib.push((src, self.slice(g, row, col, shape)?));
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let w = self.val(p).ncols();
                        if dep[p] {
                            contrib.push((p, self.slice_cols(g, c, w)?));
                        }
                        c += w;
                    }
                }
            }
            for (j, gj) in contrib {
                if !dep[j] {
                    continue;
                }
                adj[j] = Some(match adj[j] {
                    Some(prev) => self.add(prev, gj)?,
                    None => gj,
                });
            }
        }

        seed_idx
            .iter()
            .map(|&s| match grads[s] {
                Some(g) => Ok(g),
                None => {
                    let dim = self.val(s).dim();
                    self.leaf(Array2::zeros(dim))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn lift_holds_value() {
        let mut t = Tape::new();
        let a = t.lift(0.0).unwrap();
        let b = t.lift(1.5).unwrap();
        assert_eq!(t.scalar(a).unwrap(), 0.0);
        assert_eq!(t.scalar(b).unwrap(), 1.5);
        let g = t.backward(b, &[b]).unwrap();
        assert_eq!(g[0][[0, 0]], 1.0);
    }

    #[test]
    fn lift_rejects_non_finite() {
        let mut t = Tape::new();
        assert_eq!(t.lift(f64::NAN), Err(AutodiffError::NonFinite));
        assert_eq!(t.lift(f64::INFINITY), Err(AutodiffError::NonFinite));
    }

    #[test]
    fn elementary_partials() {
        let mut t = Tape::new();
        let z = t.lift(0.0).unwrap();
        let th = t.tanh(z).unwrap();
        assert_eq!(t.scalar(th).unwrap(), 0.0);
        assert_eq!(t.backward(th, &[z]).unwrap()[0][[0, 0]], 1.0);

        let x = t.lift(2.0).unwrap();
        let y = t.lift(3.0).unwrap();
        let p = t.mul(x, y).unwrap();
        assert_eq!(t.scalar(p).unwrap(), 6.0);
        let g = t.backward(p, &[x, y]).unwrap();
        assert_eq!((g[0][[0, 0]], g[1][[0, 0]]), (3.0, 2.0));

        let m = t.lift(-1.5).unwrap();
        let sq = t.square(m).unwrap();
        assert_eq!(t.scalar(sq).unwrap(), 2.25);
        let oracle = fd(|v| v * v, -1.5);
        let g = t.backward(sq, &[m]).unwrap()[0][[0, 0]];
        assert!((g - oracle).abs() < 1e-8);
        assert_eq!(g, -3.0);
    }

    #[test]
    fn cross_tape_mix_is_an_error() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.lift(1.0).unwrap();
        let b = t2.lift(2.0).unwrap();
        assert!(matches!(
            t1.add(a, b),
            Err(AutodiffError::ForeignVar { .. })
        ));
        t1.clear();
        assert!(t1.tanh(a).is_err());
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let mut t = Tape::new();
        let a = t.lift(1.0).unwrap();
        let z = t.lift(0.0).unwrap();
        let tiny = t.lift(1e-301).unwrap();
        assert_eq!(t.div(a, z), Err(AutodiffError::DivByZero));
        assert_eq!(t.div(a, tiny), Err(AutodiffError::DivByZero));
        let two = t.lift(2.0).unwrap();
        let q = t.div(a, two).unwrap();
        let g = t.backward(q, &[a, two]).unwrap();
        assert_eq!(g[0][[0, 0]], 0.5);
        assert_eq!(g[1][[0, 0]], -0.25);
    }

    #[test]
    fn unreachable_seed_gets_zero() {
        let mut t = Tape::new();
        let a = t.lift(1.0).unwrap();
        let b = t.lift(2.0).unwrap();
        let c = t.exp(a).unwrap();
        let g = t.backward(c, &[b, a]).unwrap();
        assert_eq!(g[0][[0, 0]], 0.0);
        assert_eq!(g[1][[0, 0]], 1f64.exp());
    }

    #[test]
    fn second_derivatives() {
        let mut t = Tape::new();
        let x = t.lift(1.7).unwrap();
        let f = t.square(x).unwrap();
        let d = t.backward_as_vars(f, &[x]).unwrap()[0];
        assert!((t.scalar(d).unwrap() - 3.4).abs() < 1e-15);
        assert_eq!(t.backward(d, &[x]).unwrap()[0][[0, 0]], 2.0);

        let z = t.lift(0.0).unwrap();
        let th = t.tanh(z).unwrap();
        let d = t.backward_as_vars(th, &[z]).unwrap()[0];
        assert_eq!(t.backward(d, &[z]).unwrap()[0][[0, 0]], 0.0);
    }

    #[test]
    fn mixed_second_derivative_of_squared_sensitivity() {
        // f = theta * u, d/dtheta [(df/du)^2] = 2 theta = 6.
        let mut t = Tape::new();
        let theta = t.lift(3.0).unwrap();
        let u = t.lift(5.0).unwrap();
        let f = t.mul(theta, u).unwrap();
        let dfdu = t.backward_as_vars(f, &[u]).unwrap()[0];
        let pen = t.square(dfdu).unwrap();
        let g = t.backward(pen, &[theta]).unwrap()[0][[0, 0]];
        assert_eq!(g, 6.0);
        let oracle = fd(|th| (th * 1.0).powi(2), 3.0);
        assert!((g - oracle).abs() < 1e-6);
    }

    #[test]
    fn matmul_and_shape_ops() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let b = t.leaf(array![[0.5, -1.0], [2.0, 0.0]]).unwrap();
        let c = t.matmul_t(a, b, false, true).unwrap();
        assert_eq!(t.value(c).unwrap(), &array![[-1.5, 2.0], [-2.5, 6.0], [-3.5, 10.0]]);
        let bad = t.matmul_t(a, b, true, false);
        assert!(matches!(bad, Err(AutodiffError::Shape { .. })));

        let row = t.leaf(array![[1.0, -1.0]]).unwrap();
        let br = t.broadcast(row, (3, 2)).unwrap();
        let sum = t.add(c, br).unwrap();
        let part = t.slice_cols(sum, 1, 1).unwrap();
        let cat = t.concat_cols(&[part, part]).unwrap();
        let tot = t.sum(cat).unwrap();
        assert_eq!(t.scalar(tot).unwrap(), 2.0 * (2.0 + 6.0 + 10.0 - 3.0));
        let g = t.backward(tot, &[row, b]).unwrap();
        assert_eq!(g[0], array![[0.0, 6.0]]);
        // d/dB of sum_i 2 * (A B^T)[i,1] = 2 * sum_i A[i,:] placed in row 1.
        assert_eq!(g[1], array![[0.0, 0.0], [18.0, 24.0]]);
        t.verify_replay().unwrap();
    }

    #[test]
    fn recorded_and_numeric_sweeps_agree() {
        let mut t = Tape::new();
        let a = t.leaf(array![[0.3, -0.2, 0.9], [1.1, 0.4, -0.7]]).unwrap();
        let w = t.leaf(array![[0.2, -0.5], [0.7, 0.1], [-0.3, 0.8]]).unwrap();
        let h = t.matmul(a, w).unwrap();
        let h = t.tanh(h).unwrap();
        let e = t.exp(h).unwrap();
        let q = t.div(e, h).unwrap();
        let p = t.pad(q, 1, 0, (3, 2)).unwrap();
        let s = t.sum_to(p, (1, 2)).unwrap();
        let out = t.square(s).unwrap();
        let num = t.backward(out, &[a, w]).unwrap();
        let rec = t.backward_as_vars(out, &[a, w]).unwrap();
        for (n, r) in num.iter().zip(rec) {
            let r = t.value(r).unwrap();
            for (x, y) in n.iter().zip(r.iter()) {
                assert!((x - y).abs() < 1e-13 * (1.0 + x.abs()));
            }
        }
    }

    // f(g, y) = sum(w ⊙ tanh_grad(g, y)); checks both partials and a second
    // derivative taken through the recorded sweep
    fn tanh_grad_objective(t: &mut Tape, g0: &Tensor, y0: &Tensor, w: &Tensor) -> (Var, Var, Var) {
        let g = t.leaf(g0.clone()).unwrap();
        let y = t.leaf(y0.clone()).unwrap();
        let w = t.leaf(w.clone()).unwrap();
        let tg = t.tanh_grad(g, y).unwrap();
        let p = t.mul(tg, w).unwrap();
        let s = t.sum(p).unwrap();
        (g, y, s)
    }

    #[test]
    fn tanh_grad_partials_match_differences() {
        let g0 = array![[0.4, -1.2], [0.7, 0.05]];
        let y0 = array![[0.3, -0.8], [0.6, -0.1]];
        let w = array![[1.5, -0.4], [0.9, 2.0]];
        let mut t = Tape::new();
        let (g, y, s) = tanh_grad_objective(&mut t, &g0, &y0, &w);
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let grads = t.backward(s, &[g, y]).unwrap();
            let eval = |gv: &Tensor, yv: &Tensor| -> f64 {
                gv.iter().zip(yv).zip(&w).map(|((a, b), c)| a * (1.0 - b * b) * c).sum()
            };
            let dg = fd(|x| { let mut gv = g0.clone(); gv[[i, j]] = x; eval(&gv, &y0) }, g0[[i, j]]);
            let dy = fd(|x| { let mut yv = y0.clone(); yv[[i, j]] = x; eval(&g0, &yv) }, y0[[i, j]]);
            assert!((grads[0][[i, j]] - dg).abs() < 1e-8);
            assert!((grads[1][[i, j]] - dy).abs() < 1e-8);
        }
    }

    #[test]
    fn tanh_grad_second_order() {
        let g0 = array![[0.4, -1.2, 0.3]];
        let y0 = array![[0.3, -0.8, 0.5]];
        let w = array![[1.5, -0.4, 0.7]];
        // d/dy of sum(dL/dy ⊙ v), compared against differences of the numeric sweep
        let v = array![[0.2, 1.0, -0.6]];
        let grad_dot_v = |yv: &Tensor| -> f64 {
            let mut t = Tape::new();
            let (_, y, s) = tanh_grad_objective(&mut t, &g0, yv, &w);
            let gy = &t.backward(s, &[y]).unwrap()[0];
            gy.iter().zip(&v).map(|(a, b)| a * b).sum()
        };
        let mut t = Tape::new();
        let (_, y, s) = tanh_grad_objective(&mut t, &g0, &y0, &w);
        let gy = t.backward_as_vars(s, &[y]).unwrap()[0];
        let vv = t.leaf(v.clone()).unwrap();
        let p = t.mul(gy, vv).unwrap();
        let q = t.sum(p).unwrap();
        let h = &t.backward(q, &[y]).unwrap()[0];
        for j in 0..3 {
            let oracle = fd(|x| { let mut yv = y0.clone(); yv[[0, j]] = x; grad_dot_v(&yv) }, y0[[0, j]]);
            assert!((h[[0, j]] - oracle).abs() < 1e-7, "{j}: {} vs {oracle}", h[[0, j]]);
        }
    }

    #[test]
    fn sum_at_places_and_overlaps() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = t.leaf(array![[10.0, 20.0]]).unwrap();
        let s = t.sum_at(&[(a, 0, 0), (b, 1, 1)], (3, 3)).unwrap();
        let expect = array![[1.0, 2.0, 0.0], [3.0, 14.0, 20.0], [0.0, 0.0, 0.0]];
        assert_eq!(t.value(s).unwrap(), &expect);
        assert!(t.sum_at(&[(a, 2, 2)], (3, 3)).is_err());
        assert!(t.sum_at(&[], (3, 3)).is_err());
    }

    #[test]
    fn sum_at_gradients_nested() {
        // third derivative of sum(w ⊙ sum_at(x³ parts)) against the closed form
        let x0 = array![[0.5, -0.7]];
        let w = array![[2.0, -1.0, 0.5]];
        let mut t = Tape::new();
        let x = t.leaf(x0.clone()).unwrap();
        let wv = t.leaf(w.clone()).unwrap();
        let x2 = t.square(x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let s = t.sum_at(&[(x3, 0, 0), (x3, 0, 1)], (1, 3)).unwrap();
        let p = t.mul(s, wv).unwrap();
        let f = t.sum(p).unwrap();
        let d1 = t.backward_as_vars(f, &[x]).unwrap()[0];
        // coefficient per element: w[j] + w[j+1]
        let c = [w[[0, 0]] + w[[0, 1]], w[[0, 1]] + w[[0, 2]]];
        for j in 0..2 {
            let v = t.value(d1).unwrap()[[0, j]];
            assert!((v - 3.0 * c[j] * x0[[0, j]].powi(2)).abs() < 1e-12);
        }
        let s1 = t.sum(d1).unwrap();
        let d2 = t.backward_as_vars(s1, &[x]).unwrap()[0];
        for j in 0..2 {
            let v = t.value(d2).unwrap()[[0, j]];
            assert!((v - 6.0 * c[j] * x0[[0, j]]).abs() < 1e-12);
        }
        let s2 = t.sum(d2).unwrap();
        let d3 = &t.backward(s2, &[x]).unwrap()[0];
        for j in 0..2 {
            assert!((d3[[0, j]] - 6.0 * c[j]).abs() < 1e-12);
        }
    }
}
