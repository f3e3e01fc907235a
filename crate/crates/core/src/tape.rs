//! Flat reverse-mode recording over small row-major matrices.
//!
//! Every node holds a `rows x cols` block of primal values. Element-wise
//! binary operations broadcast a side with a single row or a single column,
//! which is how per-particle quantities (`N x d`) meet population-level
//! ones (`1 x d`) and scalars (`1 x 1`). Two composite nodes carry their own
//! hand-derived adjoints: the network jet (value, spatial gradient,
//! Laplacian) and the Gaussian KDE evaluated at the cloud's own samples.

use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

use crate::kde::{KdeCloud, KdeError};
use crate::net::{JetEngine, NetConfig, NetError, NetView, TerminalWrapper};
use crate::scalar::{lit, Real};

static NEXT_RECORDING: AtomicU32 = AtomicU32::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExprId {
    recording: u32,
    index: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: argument outside the domain")]
    Domain { op: &'static str },
    #[error("{op}: non-finite result")]
    NonFinite { op: &'static str },
    #[error("value buffer of length {got} does not fill shape {shape:?}")]
    BadValue { shape: Shape, got: usize },
    #[error("expression does not belong to this recording")]
    ForeignExpr,
    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Shape),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Kde(#[from] KdeError),
}

/// Primitive kinds reachable through [`Recording::record`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind<T> {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Dot,
    Scale(T),
    Exp,
    Log,
    Square,
    Sqrt,
    Max0Sq,
    Sum,
    /// `(w, v, b)`: `v W^T + b`, row by row.
    Affine,
}

impl<T> OpKind<T> {
    pub fn arity(&self) -> usize {
        match self {
            Self::Add | Self::Sub | Self::Mul | Self::Div | Self::Dot => 2,
            Self::Affine => 3,
            _ => 1,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Neg => "neg",
            Self::Dot => "dot",
            Self::Scale(_) => "scale",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Square => "square",
            Self::Sqrt => "sqrt",
            Self::Max0Sq => "max0sq",
            Self::Sum => "sum",
            Self::Affine => "affine",
        }
    }
}

#[derive(Clone, Debug)]
struct PhiJetNode<T> {
    params: ExprId,
    points: ExprId,
    t: T,
    config: NetConfig,
    wrapper: TerminalWrapper<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(ExprId, ExprId),
    Sub(ExprId, ExprId),
    Mul(ExprId, ExprId),
    Div(ExprId, ExprId),
    Neg(ExprId),
    Dot(ExprId, ExprId),
    RowDot(ExprId, ExprId),
    Scale(ExprId, T),
    Exp(ExprId),
    Log(ExprId),
    Square(ExprId),
    Sqrt(ExprId),
    Max0Sq(ExprId),
    Sum(ExprId),
    MeanRows(ExprId),
    Affine { w: ExprId, v: ExprId, b: ExprId },
    Cols { src: ExprId, start: usize },
    PhiJet(Box<PhiJetNode<T>>),
    Kde { cloud: ExprId, bandwidth: T },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    offset: usize,
    shape: Shape,
    needs_grad: bool,
}

/// Single-writer record of a computation. Nodes are appended in evaluation
/// order, so every node's inputs precede it.
#[derive(Debug)]
pub struct Recording<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    values: Vec<T>,
}

impl<T: Real> Default for Recording<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn bdim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

#[inline]
fn bidx(s: Shape, i: usize, j: usize) -> usize {
    let r = if s.rows == 1 { 0 } else { i };
    let c = if s.cols == 1 { 0 } else { j };
    r * s.cols + c
}

impl<T: Real> Recording<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_RECORDING.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: ExprId) -> Result<&Node<T>, TapeError> {
        if id.recording != self.id {
            return Err(TapeError::ForeignExpr);
        }
        self.nodes
            .get(id.index as usize)
            .ok_or(TapeError::ForeignExpr)
    }

    pub fn shape(&self, id: ExprId) -> Result<Shape, TapeError> {
        Ok(self.node(id)?.shape)
    }

    pub fn value(&self, id: ExprId) -> Result<&[T], TapeError> {
        let n = self.node(id)?;
        Ok(&self.values[n.offset..n.offset + n.shape.len()])
    }

    /// First entry of a node; handy for scalars.
    pub fn scalar_value(&self, id: ExprId) -> Result<T, TapeError> {
        self.value(id)?.first().copied().ok_or(TapeError::BadValue {
            shape: Shape::new(0, 0),
            got: 0,
        })
    }

    fn vals(&self, id: ExprId) -> &[T] {
        let n = &self.nodes[id.index as usize];
        &self.values[n.offset..n.offset + n.shape.len()]
    }

    fn push(
        &mut self,
        op: Op<T>,
        shape: Shape,
        values: Vec<T>,
        name: &'static str,
    ) -> Result<ExprId, TapeError> {
        debug_assert_eq!(values.len(), shape.len());
        if !matches!(op, Op::Leaf | Op::Constant) && !crate::scalar::all_finite(&values) {
            return Err(TapeError::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => self
                .inputs(other)
                .iter()
                .any(|i| self.nodes[i.index as usize].needs_grad),
        };
        let offset = self.values.len();
        self.values.extend(values);
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            offset,
            shape,
            needs_grad,
        });
        Ok(ExprId {
            recording: self.id,
            index,
        })
    }

    fn inputs(&self, op: &Op<T>) -> Vec<ExprId> {
        match op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Dot(a, b)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Max0Sq(a)
            | Op::Sum(a)
            | Op::MeanRows(a) => vec![*a],
            Op::Affine { w, v, b } => vec![*w, *v, *b],
            Op::Cols { src, .. } => vec![*src],
            Op::PhiJet(j) => vec![j.params, j.points],
            Op::Kde { cloud, .. } => vec![*cloud],
        }
    }

    fn check_values(shape: Shape, values: &[T]) -> Result<(), TapeError> {
        if values.len() != shape.len() {
            return Err(TapeError::BadValue {
                shape,
                got: values.len(),
            });
        }
        Ok(())
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, values: Vec<T>, shape: Shape) -> Result<ExprId, TapeError> {
        Self::check_values(shape, &values)?;
        self.push(Op::Leaf, shape, values, "leaf")
    }

    pub fn constant(&mut self, values: Vec<T>, shape: Shape) -> Result<ExprId, TapeError> {
        Self::check_values(shape, &values)?;
        self.push(Op::Constant, shape, values, "constant")
    }

    pub fn scalar(&mut self, v: T) -> ExprId {
        self.push(Op::Constant, Shape::SCALAR, vec![v], "constant")
            .expect("constant push cannot fail")
    }

    /// Copy of `a` that the backward pass treats as a constant.
    pub fn detach(&mut self, a: ExprId) -> Result<ExprId, TapeError> {
        let shape = self.shape(a)?;
        let v = self.vals(a).to_vec();
        self.push(Op::Constant, shape, v, "detach")
    }

    /// Generic entry point: records `kind` applied to `inputs`.
    pub fn record(&mut self, kind: OpKind<T>, inputs: &[ExprId]) -> Result<ExprId, TapeError> {
        if inputs.len() != kind.arity() {
            return Err(TapeError::Arity {
                op: kind.name(),
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        let a = inputs[0];
        match kind {
            OpKind::Add => self.add(a, inputs[1]),
            OpKind::Sub => self.sub(a, inputs[1]),
            OpKind::Mul => self.mul(a, inputs[1]),
            OpKind::Div => self.div(a, inputs[1]),
            OpKind::Dot => self.dot(a, inputs[1]),
            OpKind::Neg => self.neg(a),
            OpKind::Scale(c) => self.scale(a, c),
            OpKind::Exp => self.exp(a),
            OpKind::Log => self.log(a),
            OpKind::Square => self.square(a),
            OpKind::Sqrt => self.sqrt(a),
            OpKind::Max0Sq => self.max0sq(a),
            OpKind::Sum => self.sum(a),
            OpKind::Affine => self.affine(a, inputs[1], inputs[2]),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: ExprId,
        b: ExprId,
        f: impl Fn(T, T) -> Option<T>,
        mk: fn(ExprId, ExprId) -> Op<T>,
    ) -> Result<ExprId, TapeError> {
        let sa = self.shape(a)?;
        let sb = self.shape(b)?;
        let shape = match (bdim(sa.rows, sb.rows), bdim(sa.cols, sb.cols)) {
            (Some(r), Some(c)) => Shape::new(r, c),
            _ => {
                return Err(TapeError::Shape {
                    op: name,
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let va = self.vals(a);
        let vb = self.vals(b);
        let mut out = Vec::with_capacity(shape.len());
        for i in 0..shape.rows {
            for j in 0..shape.cols {
                let v = f(va[bidx(sa, i, j)], vb[bidx(sb, i, j)])
                    .ok_or(TapeError::Domain { op: name })?;
                out.push(v);
            }
        }
        self.push(mk(a, b), shape, out, name)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: ExprId,
        f: impl Fn(T) -> Option<T>,
        mk: fn(ExprId) -> Op<T>,
    ) -> Result<ExprId, TapeError> {
        let shape = self.shape(a)?;
        let out = self
            .vals(a)
            .iter()
            .map(|v| f(*v).ok_or(TapeError::Domain { op: name }))
            .collect::<Result<Vec<_>, _>>()?;
        self.push(mk(a), shape, out, name)
    }

    pub fn add(&mut self, a: ExprId, b: ExprId) -> Result<ExprId, TapeError> {
        self.binary("add", a, b, |x, y| Some(x + y), Op::Add)
    }

    pub fn sub(&mut self, a: ExprId, b: ExprId) -> Result<ExprId, TapeError> {
        self.binary("sub", a, b, |x, y| Some(x - y), Op::Sub)
    }

    pub fn mul(&mut self, a: ExprId, b: ExprId) -> Result<ExprId, TapeError> {
        self.binary("mul", a, b, |x, y| Some(x * y), Op::Mul)
    }

    pub fn div(&mut self, a: ExprId, b: ExprId) -> Result<ExprId, TapeError> {
        self.binary(
            "div",
            a,
            b,
            |x, y| if y == T::zero() { None } else { Some(x / y) },
            Op::Div,
        )
    }

    pub fn neg(&mut self, a: ExprId) -> Result<ExprId, TapeError> {
        self.unary("neg", a, |x| Some(-x), Op::Neg)
    }

    pub fn exp(&mut self, a: ExprId) -> Result<ExprId, TapeError> {
        self.unary("exp", a, |x| Some(x.exp()), Op::Exp)
    }

    pub fn log(&mut self, a: ExprId) -> Result<ExprId, TapeError> {
        self.unary(
            "log",
            a,
            |x| if x > T::zero() { Some(x.ln()) } else { None },
            Op::Log,
        )
    }

    pub fn square(&mut self, a: ExprId) -> Result<ExprId, TapeError> {
        self.unary("square", a, |x| Some(x * x), Op::Square)
    }

    pub fn sqrt(&mut self, a: ExprId) -> Result<ExprId, TapeError> {
        self.unary(
            "sqrt",
            a,
            |x| if x >= T::zero() { Some(x.sqrt()) } else { None },
            Op::Sqrt,
        )
    }

    /// Squared ReLU, `max(u, 0)^2`.
    pub fn max0sq(&mut self, a: ExprId) -> Result<ExprId, TapeError> {
        self.unary(
            "max0sq",
            a,
            |x| {
                let r = x.max(T::zero());
                Some(r * r)
            },
            Op::Max0Sq,
        )
    }

    pub fn scale(&mut self, a: ExprId, c: T) -> Result<ExprId, TapeError> {
        let shape = self.shape(a)?;
        let out = self.vals(a).iter().map(|v| *v * c).collect();
        self.push(Op::Scale(a, c), shape, out, "scale")
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: ExprId) -> Result<ExprId, TapeError> {
        self.node(a)?;
        let s = self.vals(a).iter().copied().sum();
        self.push(Op::Sum(a), Shape::SCALAR, vec![s], "sum")
    }

    /// Full contraction of two equally shaped blocks, `1 x 1`.
    pub fn dot(&mut self, a: ExprId, b: ExprId) -> Result<ExprId, TapeError> {
        let sa = self.shape(a)?;
        let sb = self.shape(b)?;
        if sa != sb {
            return Err(TapeError::Shape {
                op: "dot",
                lhs: sa,
                rhs: sb,
            });
        }
        let s = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| *x * *y)
            .sum();
        self.push(Op::Dot(a, b), Shape::SCALAR, vec![s], "dot")
    }

    /// Row-wise inner product, `rows x 1`.
    pub fn row_dot(&mut self, a: ExprId, b: ExprId) -> Result<ExprId, TapeError> {
        let sa = self.shape(a)?;
        let sb = self.shape(b)?;
        if sa != sb {
            return Err(TapeError::Shape {
                op: "row_dot",
                lhs: sa,
                rhs: sb,
            });
        }
        let va = self.vals(a);
        let vb = self.vals(b);
        let out = (0..sa.rows)
            .map(|i| {
                let r = i * sa.cols..(i + 1) * sa.cols;
                va[r.clone()].iter().zip(&vb[r]).map(|(x, y)| *x * *y).sum()
            })
            .collect();
        self.push(Op::RowDot(a, b), Shape::new(sa.rows, 1), out, "row_dot")
    }

    /// Column means, `1 x cols`.
    pub fn mean_rows(&mut self, a: ExprId) -> Result<ExprId, TapeError> {
        let s = self.shape(a)?;
        let va = self.vals(a);
        let inv = T::one() / lit::<T>(s.rows as f64);
        let out = (0..s.cols)
            .map(|j| (0..s.rows).map(|i| va[i * s.cols + j]).sum::<T>() * inv)
            .collect();
        self.push(Op::MeanRows(a), Shape::new(1, s.cols), out, "mean_rows")
    }

    /// `v W^T + b` for each row of `v`; `w` is `m x k`, `v` is `r x k`, `b`
    /// is `1 x m` (or `r x m`).
    pub fn affine(&mut self, w: ExprId, v: ExprId, b: ExprId) -> Result<ExprId, TapeError> {
        let sw = self.shape(w)?;
        let sv = self.shape(v)?;
        let sb = self.shape(b)?;
        if sw.cols != sv.cols {
            return Err(TapeError::Shape {
                op: "affine",
                lhs: sw,
                rhs: sv,
            });
        }
        let shape = Shape::new(sv.rows, sw.rows);
        if sb.cols != sw.rows || (sb.rows != 1 && sb.rows != sv.rows) {
            return Err(TapeError::Shape {
                op: "affine",
                lhs: shape,
                rhs: sb,
            });
        }
        let (vw, vv, vb) = (self.vals(w), self.vals(v), self.vals(b));
        let mut out = Vec::with_capacity(shape.len());
        for i in 0..sv.rows {
            for m in 0..sw.rows {
                let mut acc = vb[bidx(sb, i, m)];
                for k in 0..sw.cols {
                    acc += vw[m * sw.cols + k] * vv[i * sv.cols + k];
                }
                out.push(acc);
            }
        }
        self.push(Op::Affine { w, v, b }, shape, out, "affine")
    }

    /// Columns `start..start + count` of `src`.
    pub fn cols(&mut self, src: ExprId, start: usize, count: usize) -> Result<ExprId, TapeError> {
        let s = self.shape(src)?;
        if start + count > s.cols || count == 0 {
            return Err(TapeError::Shape {
                op: "cols",
                lhs: s,
                rhs: Shape::new(1, start + count),
            });
        }
        let v = self.vals(src);
        let mut out = Vec::with_capacity(s.rows * count);
        for i in 0..s.rows {
            out.extend_from_slice(&v[i * s.cols + start..i * s.cols + start + count]);
        }
        self.push(
            Op::Cols { src, start },
            Shape::new(s.rows, count),
            out,
            "cols",
        )
    }

    /// Wrapped network jet at every row of `points` (`N x d`): output is
    /// `N x (d + 2)` with rows `[phi, grad phi, Lap phi]`. `params` must be
    /// a `1 x P` block in the flat [`crate::net::NetParams`] layout.
    pub fn phi_jet(
        &mut self,
        params: ExprId,
        points: ExprId,
        t: T,
        config: &NetConfig,
        wrapper: &TerminalWrapper<T>,
    ) -> Result<ExprId, TapeError> {
        let sp = self.shape(params)?;
        let sx = self.shape(points)?;
        if sp.len() != config.param_count() {
            return Err(NetError::ParamCount {
                expected: config.param_count(),
                got: sp.len(),
            }
            .into());
        }
        if sx.cols != config.dim {
            return Err(NetError::StateDim {
                expected: config.dim,
                got: sx.cols,
            }
            .into());
        }
        let d = config.dim;
        let stride = d + 2;
        let mut out = vec![T::zero(); sx.rows * stride];
        {
            let view = NetView::new(config, self.vals(params))?;
            let xs = self.vals(points);
            let mut engine = JetEngine::new(config);
            for i in 0..sx.rows {
                engine.forward(
                    &view,
                    wrapper,
                    t,
                    &xs[i * d..(i + 1) * d],
                    &mut out[i * stride..(i + 1) * stride],
                )?;
            }
        }
        let node = PhiJetNode {
            params,
            points,
            t,
            config: *config,
            wrapper: wrapper.clone(),
        };
        self.push(
            Op::PhiJet(Box::new(node)),
            Shape::new(sx.rows, stride),
            out,
            "phi_jet",
        )
    }

    /// Gaussian KDE of the rows of `cloud`, evaluated at those same rows:
    /// output `N x (1 + d)` with rows `[log rho, score]`.
    pub fn kde(&mut self, cloud: ExprId, bandwidth: T) -> Result<ExprId, TapeError> {
        let s = self.shape(cloud)?;
        let c = KdeCloud::new(self.vals(cloud).to_vec(), s.cols, bandwidth)?;
        let out = c.evaluate_at_samples();
        self.push(
            Op::Kde { cloud, bandwidth },
            Shape::new(s.rows, s.cols + 1),
            out,
            "kde",
        )
    }

    /// Reverse sweep from a scalar seed. Deterministic: adjoints are
    /// accumulated in reverse recording order.
    pub fn backward(&self, seed: ExprId) -> Result<Gradients<T>, TapeError> {
        let seed_node = self.node(seed)?;
        if seed_node.shape != Shape::SCALAR {
            return Err(TapeError::NonScalarSeed(seed_node.shape));
        }
        let mut adj = vec![T::zero(); self.values.len()];
        adj[seed_node.offset] = T::one();
        for idx in (0..=seed.index as usize).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = adj.split_at_mut(node.offset);
            let g = &upper[..node.shape.len()];
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            self.propagate(node, g, lower)?;
        }
        Ok(Gradients {
            recording: self.id,
            spans: self
                .nodes
                .iter()
                .map(|n| (n.offset, n.shape.len(), matches!(n.op, Op::Leaf)))
                .collect(),
            adj,
        })
    }

    fn wants(&self, id: ExprId) -> bool {
        self.nodes[id.index as usize].needs_grad
    }

    fn span(&self, id: ExprId) -> (usize, usize, Shape) {
        let n = &self.nodes[id.index as usize];
        (n.offset, n.shape.len(), n.shape)
    }

    /// Adds `g` (shaped `out`) into the broadcast input `a`.
    fn acc_broadcast(
        &self,
        lower: &mut [T],
        a: ExprId,
        out: Shape,
        g: &[T],
        coef: impl Fn(usize, usize, T) -> T,
    ) {
        if !self.wants(a) {
            return;
        }
        let (off, _, sa) = self.span(a);
        for i in 0..out.rows {
            for j in 0..out.cols {
                let k = i * out.cols + j;
                lower[off + bidx(sa, i, j)] += coef(i, j, g[k]);
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], lower: &mut [T]) -> Result<(), TapeError> {
        let out = node.shape;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.acc_broadcast(lower, *a, out, g, |_, _, gk| gk);
                self.acc_broadcast(lower, *b, out, g, |_, _, gk| gk);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(lower, *a, out, g, |_, _, gk| gk);
                self.acc_broadcast(lower, *b, out, g, |_, _, gk| -gk);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.span(*a).2, self.span(*b).2);
                let (va, vb) = (self.vals(*a), self.vals(*b));
                self.acc_broadcast(lower, *a, out, g, |i, j, gk| gk * vb[bidx(sb, i, j)]);
                self.acc_broadcast(lower, *b, out, g, |i, j, gk| gk * va[bidx(sa, i, j)]);
            }
            Op::Div(a, b) => {
                let (sa, sb) = (self.span(*a).2, self.span(*b).2);
                let (va, vb) = (self.vals(*a), self.vals(*b));
                self.acc_broadcast(lower, *a, out, g, |i, j, gk| gk / vb[bidx(sb, i, j)]);
                self.acc_broadcast(lower, *b, out, g, |i, j, gk| {
                    let y = vb[bidx(sb, i, j)];
                    -gk * va[bidx(sa, i, j)] / (y * y)
                });
            }
            Op::Neg(a) => self.acc_unary(lower, *a, |k, _| -g[k]),
            Op::Scale(a, c) => self.acc_unary(lower, *a, |k, _| g[k] * *c),
            Op::Exp(a) => {
                let outv = &self.values[node.offset..node.offset + out.len()];
                self.acc_unary(lower, *a, |k, _| g[k] * outv[k]);
            }
            Op::Log(a) => self.acc_unary(lower, *a, |k, x| g[k] / x),
            Op::Square(a) => self.acc_unary(lower, *a, |k, x| g[k] * lit(2.0) * x),
            Op::Sqrt(a) => {
                let outv = &self.values[node.offset..node.offset + out.len()];
                self.acc_unary(lower, *a, |k, _| g[k] / (lit::<T>(2.0) * outv[k]));
            }
            Op::Max0Sq(a) => self.acc_unary(lower, *a, |k, x| g[k] * lit(2.0) * x.max(T::zero())),
            Op::Sum(a) => self.acc_unary(lower, *a, |_, _| g[0]),
            Op::Dot(a, b) => {
                let (va, vb) = (self.vals(*a), self.vals(*b));
                self.acc_unary(lower, *a, |k, _| g[0] * vb[k]);
                self.acc_unary(lower, *b, |k, _| g[0] * va[k]);
            }
            Op::RowDot(a, b) => {
                let cols = self.span(*a).2.cols;
                let (va, vb) = (self.vals(*a), self.vals(*b));
                self.acc_unary(lower, *a, |k, _| g[k / cols] * vb[k]);
                self.acc_unary(lower, *b, |k, _| g[k / cols] * va[k]);
            }
            Op::MeanRows(a) => {
                let sa = self.span(*a).2;
                let inv = T::one() / lit::<T>(sa.rows as f64);
                self.acc_unary(lower, *a, |k, _| g[k % sa.cols] * inv);
            }
            Op::Cols { src, start } => {
                if self.wants(*src) {
                    let (off, _, s) = self.span(*src);
                    for i in 0..out.rows {
                        for j in 0..out.cols {
                            lower[off + i * s.cols + start + j] += g[i * out.cols + j];
                        }
                    }
                }
            }
            Op::Affine { w, v, b } => {
                let (ow, _, sw) = self.span(*w);
                let (ov, _, sv) = self.span(*v);
                let (vw, vv) = (self.vals(*w), self.vals(*v));
                if self.wants(*w) {
                    for i in 0..sv.rows {
                        for m in 0..sw.rows {
                            let gk = g[i * sw.rows + m];
                            for k in 0..sw.cols {
                                lower[ow + m * sw.cols + k] += gk * vv[i * sv.cols + k];
                            }
                        }
                    }
                }
                if self.wants(*v) {
                    for i in 0..sv.rows {
                        for m in 0..sw.rows {
                            let gk = g[i * sw.rows + m];
                            for k in 0..sw.cols {
                                lower[ov + i * sv.cols + k] += gk * vw[m * sw.cols + k];
                            }
                        }
                    }
                }
                self.acc_broadcast(lower, *b, out, g, |_, _, gk| gk);
            }
            Op::PhiJet(j) => {
                let d = j.config.dim;
                let stride = d + 2;
                let view = NetView::new(&j.config, self.vals(j.params))?;
                let xs = self.vals(j.points);
                let mut p_bar = vec![T::zero(); j.config.param_count()];
                let mut x_bar = vec![T::zero(); xs.len()];
                let mut engine = JetEngine::new(&j.config);
                for i in 0..out.rows {
                    let bar = &g[i * stride..(i + 1) * stride];
                    if bar.iter().all(|v| *v == T::zero()) {
                        continue;
                    }
                    engine.vjp(
                        &view,
                        &j.wrapper,
                        j.t,
                        &xs[i * d..(i + 1) * d],
                        bar,
                        &mut p_bar,
                        &mut x_bar[i * d..(i + 1) * d],
                    )?;
                }
                self.add_into(lower, j.params, &p_bar);
                self.add_into(lower, j.points, &x_bar);
            }
            Op::Kde { cloud, bandwidth } => {
                if self.wants(*cloud) {
                    let s = self.span(*cloud).2;
                    let c = KdeCloud::new(self.vals(*cloud).to_vec(), s.cols, *bandwidth)?;
                    let bar = c.vjp_at_samples(g);
                    self.add_into(lower, *cloud, &bar);
                }
            }
        }
        Ok(())
    }

    /// Accumulates `f(k, x_k)` into every entry `k` of `a`.
    fn acc_unary(&self, lower: &mut [T], a: ExprId, f: impl Fn(usize, T) -> T) {
        if !self.wants(a) {
            return;
        }
        let (off, len, _) = self.span(a);
        let va = self.vals(a);
        for k in 0..len {
            lower[off + k] += f(k, va[k]);
        }
    }

    fn add_into(&self, lower: &mut [T], a: ExprId, bar: &[T]) {
        if !self.wants(a) {
            return;
        }
        let (off, len, _) = self.span(a);
        for (dst, src) in lower[off..off + len].iter_mut().zip(bar) {
            *dst += *src;
        }
    }
}

/// Adjoints from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    recording: u32,
    spans: Vec<(usize, usize, bool)>,
    adj: Vec<T>,
}

impl<T: Real> Gradients<T> {
    /// `d seed / d id`; zero for nodes the seed does not depend on.
    pub fn wrt(&self, id: ExprId) -> Result<&[T], TapeError> {
        if id.recording != self.recording {
            return Err(TapeError::ForeignExpr);
        }
        let (off, len, _) = *self
            .spans
            .get(id.index as usize)
            .ok_or(TapeError::ForeignExpr)?;
        Ok(&self.adj[off..off + len])
    }

    /// Gradient for every leaf, in recording order.
    pub fn leaves(&self) -> impl Iterator<Item = (ExprId, &[T])> + '_ {
        self.spans
            .iter()
            .enumerate()
            .filter(|(_, s)| s.2)
            .map(move |(i, &(off, len, _))| {
                (
                    ExprId {
                        recording: self.recording,
                        index: i as u32,
                    },
                    &self.adj[off..off + len],
                )
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(r: &mut Recording<f64>, v: f64) -> ExprId {
        r.leaf(vec![v], Shape::SCALAR).unwrap()
    }

    #[test]
    fn record_mul_and_max0sq() {
        let mut r = Recording::new();
        let a = scalar_leaf(&mut r, 3.0);
        let b = scalar_leaf(&mut r, 4.0);
        let c = r.record(OpKind::Mul, &[a, b]).unwrap();
        assert_eq!(r.value(c).unwrap(), &[12.0]);
        let u = scalar_leaf(&mut r, -1.0);
        let s = r.record(OpKind::Max0Sq, &[u]).unwrap();
        assert_eq!(r.value(s).unwrap(), &[0.0]);
    }

    #[test]
    fn log_domain_and_arity_errors() {
        let mut r = Recording::new();
        let z = scalar_leaf(&mut r, 0.0);
        assert_eq!(
            r.record(OpKind::Log, &[z]),
            Err(TapeError::Domain { op: "log" })
        );
        assert!(matches!(
            r.record(OpKind::Add, &[z]),
            Err(TapeError::Arity {
                expected: 2,
                got: 1,
                ..
            })
        ));
        assert!(matches!(
            r.record(OpKind::Div, &[z, z]),
            Err(TapeError::Domain { .. })
        ));
    }

    #[test]
    fn simple_derivatives() {
        let mut r = Recording::new();
        let x = scalar_leaf(&mut r, 3.0);
        let f = r.square(x).unwrap();
        assert_eq!(r.backward(f).unwrap().wrt(x).unwrap(), &[6.0]);

        let mut r = Recording::new();
        let u = scalar_leaf(&mut r, 2.0);
        let v = scalar_leaf(&mut r, 5.0);
        let f = r.mul(u, v).unwrap();
        let g = r.backward(f).unwrap();
        assert_eq!(g.wrt(u).unwrap(), &[5.0]);
        assert_eq!(g.wrt(v).unwrap(), &[2.0]);
    }

    #[test]
    fn max0sq_adjoint() {
        let mut r = Recording::new();
        let u = scalar_leaf(&mut r, 2.0);
        let s = r.max0sq(u).unwrap();
        assert_eq!(r.value(s).unwrap(), &[4.0]);
        assert_eq!(r.backward(s).unwrap().wrt(u).unwrap(), &[4.0]);
        // subgradient convention at 0
        let mut r = Recording::new();
        let u = scalar_leaf(&mut r, 0.0);
        let s = r.max0sq(u).unwrap();
        assert_eq!(r.backward(s).unwrap().wrt(u).unwrap(), &[0.0]);
    }

    #[test]
    fn affine_identity() {
        let mut r = Recording::new();
        let w = r
            .constant(vec![1.0, 0.0, 0.0, 1.0], Shape::new(2, 2))
            .unwrap();
        let b = r.constant(vec![0.0, 0.0], Shape::new(1, 2)).unwrap();
        let v = r.leaf(vec![0.3, -2.0], Shape::new(1, 2)).unwrap();
        let y = r.affine(w, v, b).unwrap();
        assert_eq!(r.value(y).unwrap(), &[0.3, -2.0]);
    }

    #[test]
    fn unused_leaf_has_zero_adjoint() {
        let mut r = Recording::new();
        let a = scalar_leaf(&mut r, 1.5);
        let unused = r.leaf(vec![1.0, 2.0], Shape::new(1, 2)).unwrap();
        let f = r.exp(a).unwrap();
        let g = r.backward(f).unwrap();
        assert_eq!(g.wrt(unused).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.leaves().count(), 2);
    }

    #[test]
    fn foreign_and_non_scalar_seeds() {
        let mut r1 = Recording::<f64>::new();
        let mut r2 = Recording::<f64>::new();
        let a = r1.leaf(vec![1.0, 2.0], Shape::new(1, 2)).unwrap();
        let b = scalar_leaf(&mut r2, 1.0);
        assert!(matches!(r1.backward(b), Err(TapeError::ForeignExpr)));
        assert!(matches!(r1.backward(a), Err(TapeError::NonScalarSeed(_))));
    }

    #[test]
    fn broadcast_shapes() {
        let mut r = Recording::new();
        let m = r
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Shape::new(3, 2))
            .unwrap();
        let row = r.leaf(vec![10.0, 20.0], Shape::new(1, 2)).unwrap();
        let s = r.add(m, row).unwrap();
        assert_eq!(r.value(s).unwrap(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let total = r.sum(s).unwrap();
        let g = r.backward(total).unwrap();
        assert_eq!(g.wrt(row).unwrap(), &[3.0, 3.0]);
        let bad = r.leaf(vec![1.0, 2.0, 3.0], Shape::new(1, 3)).unwrap();
        assert!(matches!(r.add(m, bad), Err(TapeError::Shape { .. })));
    }
}
