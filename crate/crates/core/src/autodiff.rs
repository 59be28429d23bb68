//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every node holds a dense real matrix. Elementwise primitives broadcast
//! `1×n`, `m×1` and `1×1` operands, so a `1×1` node is an ordinary scalar and
//! the tape degrades to a classic scalar-node tape. The matrix primitives
//! (`matmul`, block-wise products, slicing) exist so the network and the
//! propagator can be recorded without one node per entry.
//!
//! Nodes are appended in evaluation order, so every input index is smaller
//! than the index of the node that consumes it. Values are computed eagerly
//! and checked for NaN/Inf at creation time.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// Index of a node on a [`DiffGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Constant,
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Exp,
    Sqrt,
    Square,
    Abs,
    Tanh,
    Relu,
    /// Heaviside step `x > 0`; its derivative is zero almost everywhere.
    Step,
    /// Multiplication by a fixed real factor.
    Scale(f64),
    MatMul,
    Transpose,
    /// Sum of every entry, giving a `1×1` node.
    SumAll,
    /// Row sums, `m×n → m×1`.
    SumRows,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    /// Product of stacked blocks: `(b·m)×k` times `(b·k)×n` gives `(b·m)×n`,
    /// block `i` of the result being `A_i · B_i`.
    BlockMatMul { blocks: usize },
    /// `s` (`b×1`) and `M` (`m×n`) give the stack of `s_i · M`, `(b·m)×n`.
    ScaleBlocks,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Constant => "constant",
            OpKind::Input => "input",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Exp => "exp",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Abs => "abs",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Step => "step",
            OpKind::Scale(_) => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::SumAll => "sum_all",
            OpKind::SumRows => "sum_rows",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::BlockMatMul { .. } => "block_matmul",
            OpKind::ScaleBlocks => "scale_blocks",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::Constant | OpKind::Input => 0,
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::BlockMatMul { .. }
            | OpKind::ScaleBlocks => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    pub value: Array2<f64>,
    /// True when an input node is reachable through `inputs`.
    requires_grad: bool,
}

/// Seed for a forward-mode sweep: every entry of `seeded_input` gets tangent
/// `seed_value`, all other inputs get zero.
#[derive(Debug, Clone, Copy)]
pub struct TangentSeed {
    pub seeded_input: NodeId,
    pub seed_value: f64,
}

/// Adjoints produced by [`DiffGraph::backward`].
#[derive(Debug)]
pub struct Adjoints {
    adjoints: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Adjoints {
    /// Adjoint of `id`; zero for nodes the root does not depend on.
    pub fn get(&self, id: NodeId) -> Array2<f64> {
        match &self.adjoints[id.0] {
            Some(a) => a.clone(),
            None => Array2::zeros(self.shapes[id.0]),
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.adjoints[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Array2<f64> {
        match self.adjoints[id.0].take() {
            Some(a) => a,
            None => Array2::zeros(self.shapes[id.0]),
        }
    }
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct DiffGraph {
    nodes: Vec<Node>,
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

fn broadcast_dim(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::ShapeMismatch { op, lhs: a, rhs: b }),
    }
}

fn bview<'a>(a: &'a Array2<f64>, to: (usize, usize)) -> ArrayView2<'a, f64> {
    a.broadcast(to).expect("shape checked at record time")
}

/// Sums `g` down to `target` along broadcast axes.
fn reduce_to(g: Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn binary_map(
    a: &Array2<f64>,
    b: &Array2<f64>,
    to: (usize, usize),
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let mut out = Array2::zeros(to);
    Zip::from(&mut out)
        .and(&bview(a, to))
        .and(&bview(b, to))
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn ternary_map(
    a: &Array2<f64>,
    b: &Array2<f64>,
    c: &Array2<f64>,
    to: (usize, usize),
    f: impl Fn(f64, f64, f64) -> f64,
) -> Array2<f64> {
    let mut out = Array2::zeros(to);
    Zip::from(&mut out)
        .and(&bview(a, to))
        .and(&bview(b, to))
        .and(&bview(c, to))
        .for_each(|o, &x, &y, &z| *o = f(x, y, z));
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn block_matmul(a: &Array2<f64>, b: &Array2<f64>, blocks: usize) -> Array2<f64> {
    let m = a.nrows() / blocks;
    let k = a.ncols();
    let n = b.ncols();
    let mut out = Array2::zeros((blocks * m, n));
    for i in 0..blocks {
        let ab = a.slice(s![i * m..(i + 1) * m, ..]);
        let bb = b.slice(s![i * k..(i + 1) * k, ..]);
        let mut ob = out.slice_mut(s![i * m..(i + 1) * m, ..]);
        ndarray::linalg::general_mat_mul(1.0, &ab, &bb, 0.0, &mut ob);
    }
    out
}

/// Block-wise `A_i^T · G_i` for stacked `A` (`(b·m)×k`) and `G` (`(b·m)×n`).
fn block_tmatmul_left(a: &Array2<f64>, g: &Array2<f64>, blocks: usize) -> Array2<f64> {
    let m = a.nrows() / blocks;
    let k = a.ncols();
    let n = g.ncols();
    let mut out = Array2::zeros((blocks * k, n));
    for i in 0..blocks {
        let ab = a.slice(s![i * m..(i + 1) * m, ..]);
        let gb = g.slice(s![i * m..(i + 1) * m, ..]);
        let mut ob = out.slice_mut(s![i * k..(i + 1) * k, ..]);
        ndarray::linalg::general_mat_mul(1.0, &ab.t(), &gb, 0.0, &mut ob);
    }
    out
}

/// Block-wise `G_i · B_i^T` for stacked `G` (`(b·m)×n`) and `B` (`(b·k)×n`).
fn block_matmul_tright(g: &Array2<f64>, b: &Array2<f64>, blocks: usize) -> Array2<f64> {
    let m = g.nrows() / blocks;
    let k = b.nrows() / blocks;
    let mut out = Array2::zeros((blocks * m, k));
    for i in 0..blocks {
        let gb = g.slice(s![i * m..(i + 1) * m, ..]);
        let bb = b.slice(s![i * k..(i + 1) * k, ..]);
        let mut ob = out.slice_mut(s![i * m..(i + 1) * m, ..]);
        ndarray::linalg::general_mat_mul(1.0, &gb, &bb.t(), 0.0, &mut ob);
    }
    out
}

fn scale_blocks(s: &Array2<f64>, m: &Array2<f64>) -> Array2<f64> {
    let blocks = s.nrows();
    let (r, c) = shape(m);
    let mut out = Array2::zeros((blocks * r, c));
    for i in 0..blocks {
        let si = s[[i, 0]];
        out.slice_mut(s![i * r..(i + 1) * r, ..])
            .zip_mut_with(m, |o, &x| *o = si * x);
    }
    out
}

fn accumulate(slot: &mut Option<Array2<f64>>, contribution: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &contribution,
        None => *slot = Some(contribution),
    }
}

impl DiffGraph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a `1×1` node (or the first entry of a larger one).
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        shape(&self.nodes[id.0].value)
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, value: Array2<f64>, requires_grad: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue { op: op.name(), node: id });
        }
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    /// A leaf that the root is differentiated against.
    pub fn input(&mut self, value: Array2<f64>) -> Result<NodeId> {
        self.push(OpKind::Input, Vec::new(), value, true)
    }

    pub fn input_scalar(&mut self, value: f64) -> Result<NodeId> {
        self.input(Array2::from_elem((1, 1), value))
    }

    /// A leaf that carries no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Result<NodeId> {
        self.push(OpKind::Constant, Vec::new(), value, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<NodeId> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Appends `op` applied to `inputs`, evaluating it immediately.
    pub fn record_primitive(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != op.arity() || op.arity() == 0 {
            return Err(Error::ArityMismatch {
                op: op.name(),
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(id.0));
            }
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let value = self.evaluate(op, inputs)?;
        self.push(op, inputs.to_vec(), value, requires_grad)
    }

    fn evaluate(&self, op: OpKind, inputs: &[NodeId]) -> Result<Array2<f64>> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let name = op.name();
        let out = match op {
            OpKind::Constant | OpKind::Input => unreachable!("leaves are not recorded as primitives"),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let to = broadcast_dim(name, shape(v(0)), shape(v(1)))?;
                match op {
                    OpKind::Add => binary_map(v(0), v(1), to, |x, y| x + y),
                    OpKind::Sub => binary_map(v(0), v(1), to, |x, y| x - y),
                    OpKind::Mul => binary_map(v(0), v(1), to, |x, y| x * y),
                    _ => binary_map(v(0), v(1), to, |x, y| x / y),
                }
            }
            OpKind::Neg => v(0).mapv(|x| -x),
            OpKind::Sin => v(0).mapv(f64::sin),
            OpKind::Cos => v(0).mapv(f64::cos),
            OpKind::Exp => v(0).mapv(f64::exp),
            OpKind::Sqrt => v(0).mapv(f64::sqrt),
            OpKind::Square => v(0).mapv(|x| x * x),
            OpKind::Abs => v(0).mapv(f64::abs),
            OpKind::Tanh => v(0).mapv(f64::tanh),
            OpKind::Relu => v(0).mapv(|x| x.max(0.0)),
            OpKind::Step => v(0).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            OpKind::Scale(c) => v(0).mapv(|x| c * x),
            OpKind::MatMul => {
                if v(0).ncols() != v(1).nrows() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        lhs: shape(v(0)),
                        rhs: shape(v(1)),
                    });
                }
                v(0).dot(v(1))
            }
            OpKind::Transpose => v(0).t().to_owned(),
            OpKind::SumAll => Array2::from_elem((1, 1), v(0).sum()),
            OpKind::SumRows => v(0).sum_axis(Axis(1)).insert_axis(Axis(1)),
            OpKind::SliceRows { start, len } => {
                if start + len > v(0).nrows() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        lhs: shape(v(0)),
                        rhs: (start + len, v(0).ncols()),
                    });
                }
                v(0).slice(s![start..start + len, ..]).to_owned()
            }
            OpKind::SliceCols { start, len } => {
                if start + len > v(0).ncols() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        lhs: shape(v(0)),
                        rhs: (v(0).nrows(), start + len),
                    });
                }
                v(0).slice(s![.., start..start + len]).to_owned()
            }
            OpKind::BlockMatMul { blocks } => {
                let (a, b) = (v(0), v(1));
                if blocks == 0
                    || a.nrows() % blocks != 0
                    || b.nrows() % blocks != 0
                    || a.ncols() != b.nrows() / blocks
                {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        lhs: shape(a),
                        rhs: shape(b),
                    });
                }
                block_matmul(a, b, blocks)
            }
            OpKind::ScaleBlocks => {
                if v(0).ncols() != 1 {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        lhs: shape(v(0)),
                        rhs: shape(v(1)),
                    });
                }
                scale_blocks(v(0), v(1))
            }
        };
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Div, &[a, b])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Neg, &[a])
    }
    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Sin, &[a])
    }
    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Cos, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Exp, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Sqrt, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Square, &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Abs, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Tanh, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Relu, &[a])
    }
    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Step, &[a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record_primitive(OpKind::Scale(c), &[a])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::Transpose, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::SumAll, &[a])
    }
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::SumRows, &[a])
    }
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.record_primitive(OpKind::SliceRows { start, len }, &[a])
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.record_primitive(OpKind::SliceCols { start, len }, &[a])
    }
    pub fn block_matmul(&mut self, a: NodeId, b: NodeId, blocks: usize) -> Result<NodeId> {
        self.record_primitive(OpKind::BlockMatMul { blocks }, &[a, b])
    }
    pub fn scale_blocks(&mut self, s: NodeId, m: NodeId) -> Result<NodeId> {
        self.record_primitive(OpKind::ScaleBlocks, &[s, m])
    }

    /// Adds a constant scalar `c` to every entry of `a`.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.constant_scalar(c)?;
        self.add(a, k)
    }

    /// One reverse sweep from `root`, which must be `1×1`.
    pub fn backward(&self, root: NodeId) -> Result<Adjoints> {
        if root.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(root.0));
        }
        let root_shape = self.shape(root);
        if root_shape != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: root_shape,
                rhs: (1, 1),
            });
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.pull_back(idx, &g, &mut adj)?;
            adj[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| shape(&n.value)).collect();
        adj.resize(self.nodes.len(), None);
        Ok(Adjoints { adjoints: adj, shapes })
    }

    fn pull_back(&self, idx: usize, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let inp = &node.inputs;
        let val = |i: usize| &self.nodes[inp[i].0].value;
        let wants = |i: usize| self.nodes[inp[i].0].requires_grad;
        let out = &node.value;
        let to = shape(out);

        // Unary elementwise rules share the pattern g ⊙ f'(x).
        let unary = |f: &dyn Fn(f64, f64) -> f64| -> Array2<f64> {
            let mut r = g.clone();
            Zip::from(&mut r)
                .and(val(0))
                .and(out)
                .for_each(|r, &x, &y| *r *= f(x, y));
            r
        };

        match node.op {
            OpKind::Constant | OpKind::Input => {}
            OpKind::Add | OpKind::Sub => {
                if wants(0) {
                    accumulate(&mut adj[inp[0].0], reduce_to(g.clone(), shape(val(0))));
                }
                if wants(1) {
                    let gb = if node.op == OpKind::Sub { g.mapv(|x| -x) } else { g.clone() };
                    accumulate(&mut adj[inp[1].0], reduce_to(gb, shape(val(1))));
                }
            }
            OpKind::Mul => {
                if wants(0) {
                    let ga = binary_map(g, val(1), to, |g, b| g * b);
                    accumulate(&mut adj[inp[0].0], reduce_to(ga, shape(val(0))));
                }
                if wants(1) {
                    let gb = binary_map(g, val(0), to, |g, a| g * a);
                    accumulate(&mut adj[inp[1].0], reduce_to(gb, shape(val(1))));
                }
            }
            OpKind::Div => {
                if wants(0) {
                    let ga = binary_map(g, val(1), to, |g, b| g / b);
                    accumulate(&mut adj[inp[0].0], reduce_to(ga, shape(val(0))));
                }
                if wants(1) {
                    let gb = ternary_map(g, out, val(1), to, |g, q, b| -g * q / b);
                    accumulate(&mut adj[inp[1].0], reduce_to(gb, shape(val(1))));
                }
            }
            OpKind::Neg => accumulate(&mut adj[inp[0].0], g.mapv(|x| -x)),
            OpKind::Sin => accumulate(&mut adj[inp[0].0], unary(&|x, _| x.cos())),
            OpKind::Cos => accumulate(&mut adj[inp[0].0], unary(&|x, _| -x.sin())),
            OpKind::Exp => accumulate(&mut adj[inp[0].0], unary(&|_, y| y)),
            OpKind::Sqrt => accumulate(&mut adj[inp[0].0], unary(&|_, y| 0.5 / y)),
            OpKind::Square => accumulate(&mut adj[inp[0].0], unary(&|x, _| 2.0 * x)),
            OpKind::Abs => accumulate(&mut adj[inp[0].0], unary(&|x, _| sign(x))),
            OpKind::Tanh => accumulate(&mut adj[inp[0].0], unary(&|_, y| 1.0 - y * y)),
            OpKind::Relu => accumulate(&mut adj[inp[0].0], unary(&|x, _| if x > 0.0 { 1.0 } else { 0.0 })),
            OpKind::Step => {}
            OpKind::Scale(c) => accumulate(&mut adj[inp[0].0], g.mapv(|x| c * x)),
            OpKind::MatMul => {
                if wants(0) {
                    accumulate(&mut adj[inp[0].0], g.dot(&val(1).t()));
                }
                if wants(1) {
                    accumulate(&mut adj[inp[1].0], val(0).t().dot(g));
                }
            }
            OpKind::Transpose => accumulate(&mut adj[inp[0].0], g.t().to_owned()),
            OpKind::SumAll => {
                let g0 = g[[0, 0]];
                accumulate(&mut adj[inp[0].0], Array2::from_elem(shape(val(0)), g0));
            }
            OpKind::SumRows => {
                let full = g.broadcast(shape(val(0))).expect("column broadcast").to_owned();
                accumulate(&mut adj[inp[0].0], full);
            }
            OpKind::SliceRows { start, len } => {
                let slot = &mut adj[inp[0].0];
                let acc = slot.get_or_insert_with(|| Array2::zeros(shape(val(0))));
                let mut view = acc.slice_mut(s![start..start + len, ..]);
                view += g;
            }
            OpKind::SliceCols { start, len } => {
                let slot = &mut adj[inp[0].0];
                let acc = slot.get_or_insert_with(|| Array2::zeros(shape(val(0))));
                let mut view = acc.slice_mut(s![.., start..start + len]);
                view += g;
            }
            OpKind::BlockMatMul { blocks } => {
                if wants(0) {
                    accumulate(&mut adj[inp[0].0], block_matmul_tright(g, val(1), blocks));
                }
                if wants(1) {
                    accumulate(&mut adj[inp[1].0], block_tmatmul_left(val(0), g, blocks));
                }
            }
            OpKind::ScaleBlocks => {
                let (sv, m) = (val(0), val(1));
                let (r, c) = shape(m);
                let blocks = sv.nrows();
                if wants(0) {
                    let mut gs = Array2::zeros((blocks, 1));
                    for i in 0..blocks {
                        let gb = g.slice(s![i * r..(i + 1) * r, ..]);
                        gs[[i, 0]] = (&gb * m).sum();
                    }
                    accumulate(&mut adj[inp[0].0], gs);
                }
                if wants(1) {
                    let mut gm = Array2::zeros((r, c));
                    for i in 0..blocks {
                        let gb = g.slice(s![i * r..(i + 1) * r, ..]);
                        gm.scaled_add(sv[[i, 0]], &gb);
                    }
                    accumulate(&mut adj[inp[1].0], gm);
                }
            }
        }
        for &i in inp {
            if let Some(a) = &adj[i.0] {
                if !a.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteValue {
                        op: node.op.name(),
                        node: i.0,
                    });
                }
            }
        }
        Ok(())
    }

    /// Forward-mode sweep: the tangent of every node with respect to the
    /// seeded input, by the dual-number rules. `None` marks a zero tangent.
    pub fn forward_tangent(&self, seed: TangentSeed) -> Result<Vec<Option<Array2<f64>>>> {
        let seeded = seed.seeded_input.0;
        if seeded >= self.nodes.len() {
            return Err(Error::UnknownNode(seeded));
        }
        if self.nodes[seeded].op != OpKind::Input {
            return Err(Error::SeedNotInput(seeded));
        }
        let mut tan: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let t = if idx == seeded {
                Some(Array2::from_elem(shape(&node.value), seed.seed_value))
            } else {
                self.tangent_of(node, &tan)
            };
            tan.push(t);
        }
        Ok(tan)
    }

    fn tangent_of(&self, node: &Node, tan: &[Option<Array2<f64>>]) -> Option<Array2<f64>> {
        let inp = &node.inputs;
        if inp.is_empty() {
            return None;
        }
        let val = |i: usize| &self.nodes[inp[i].0].value;
        let t = |i: usize| tan[inp[i].0].as_ref();
        if inp.iter().all(|i| tan[i.0].is_none()) {
            return None;
        }
        let out = &node.value;
        let to = shape(out);
        let unary = |f: &dyn Fn(f64, f64) -> f64| -> Array2<f64> {
            let mut r = t(0).expect("nonzero tangent").clone();
            Zip::from(&mut r)
                .and(val(0))
                .and(out)
                .for_each(|r, &x, &y| *r *= f(x, y));
            r
        };

        let r = match node.op {
            OpKind::Constant | OpKind::Input => return None,
            OpKind::Add | OpKind::Sub => {
                let sgn = if node.op == OpKind::Sub { -1.0 } else { 1.0 };
                let mut r = Array2::zeros(to);
                if let Some(ta) = t(0) {
                    r += &bview(ta, to);
                }
                if let Some(tb) = t(1) {
                    r.scaled_add(sgn, &bview(tb, to));
                }
                r
            }
            OpKind::Mul => {
                let mut r = Array2::zeros(to);
                if let Some(ta) = t(0) {
                    r += &binary_map(ta, val(1), to, |x, y| x * y);
                }
                if let Some(tb) = t(1) {
                    r += &binary_map(val(0), tb, to, |x, y| x * y);
                }
                r
            }
            OpKind::Div => {
                let mut r = Array2::zeros(to);
                if let Some(ta) = t(0) {
                    r += &binary_map(ta, val(1), to, |x, y| x / y);
                }
                if let Some(tb) = t(1) {
                    r -= &ternary_map(out, tb, val(1), to, |q, tb, b| q * tb / b);
                }
                r
            }
            OpKind::Neg => t(0)?.mapv(|x| -x),
            OpKind::Sin => unary(&|x, _| x.cos()),
            OpKind::Cos => unary(&|x, _| -x.sin()),
            OpKind::Exp => unary(&|_, y| y),
            OpKind::Sqrt => unary(&|_, y| 0.5 / y),
            OpKind::Square => unary(&|x, _| 2.0 * x),
            OpKind::Abs => unary(&|x, _| sign(x)),
            OpKind::Tanh => unary(&|_, y| 1.0 - y * y),
            OpKind::Relu => unary(&|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            OpKind::Step => return None,
            OpKind::Scale(c) => t(0)?.mapv(|x| c * x),
            OpKind::MatMul => {
                let mut r = Array2::zeros(to);
                if let Some(ta) = t(0) {
                    r += &ta.dot(val(1));
                }
                if let Some(tb) = t(1) {
                    r += &val(0).dot(tb);
                }
                r
            }
            OpKind::Transpose => t(0)?.t().to_owned(),
            OpKind::SumAll => Array2::from_elem((1, 1), t(0)?.sum()),
            OpKind::SumRows => t(0)?.sum_axis(Axis(1)).insert_axis(Axis(1)),
            OpKind::SliceRows { start, len } => t(0)?.slice(s![start..start + len, ..]).to_owned(),
            OpKind::SliceCols { start, len } => t(0)?.slice(s![.., start..start + len]).to_owned(),
            OpKind::BlockMatMul { blocks } => {
                let mut r = Array2::zeros(to);
                if let Some(ta) = t(0) {
                    r += &block_matmul(ta, val(1), blocks);
                }
                if let Some(tb) = t(1) {
                    r += &block_matmul(val(0), tb, blocks);
                }
                r
            }
            OpKind::ScaleBlocks => {
                let mut r = Array2::zeros(to);
                if let Some(ts) = t(0) {
                    r += &scale_blocks(ts, val(1));
                }
                if let Some(tm) = t(1) {
                    r += &scale_blocks(val(0), tm);
                }
                r
            }
        };
        Some(r)
    }
}
