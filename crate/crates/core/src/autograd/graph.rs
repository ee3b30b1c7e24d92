use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Index of a node inside its [`Graph`].
pub type NodeId = usize;

/// Primitive tag of a node.
///
/// Binary element-wise primitives broadcast: each operand dimension must
/// either equal the output dimension or be 1.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Trainable leaf; gradients are reported under its name.
    Param(String),
    /// Named data leaf; can be rebound by [`Graph::eval_forward`].
    Input(String),
    /// Anonymous constant leaf; never receives a reported gradient.
    Const,
    MatMul,
    Add,
    Mul,
    Sigmoid,
    Tanh,
    /// `max(0, x)`; doubles as ReLU.
    MaxZero,
    /// `ln(1 + e^x)`.
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
    /// Row-wise softmax (last axis).
    Softmax,
    /// Concatenation along columns (`axis == 1`) or rows (`axis == 0`).
    Concat { axis: usize },
    Slice { rows: Range<usize>, cols: Range<usize> },
    /// Sum of all entries, yields 1x1.
    Sum,
    /// Sum across each row, yields `rows x 1`.
    SumRows,
    /// Mean of all entries, yields 1x1.
    Mean,
    Transpose,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Const => "const",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::MaxZero => "max-with-zero",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Softmax => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum => "sum",
            Op::SumRows => "sum-rows",
            Op::Mean => "mean",
            Op::Transpose => "transpose",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Param(_) | Op::Input(_) | Op::Const)
    }
}

#[derive(Debug, Clone)]
pub struct ValueNode {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in topological order and evaluated eagerly as they
/// are created, so values can be read back while a model is being unrolled.
/// The whole graph can then be re-evaluated with new leaf bindings.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<ValueNode>,
    leaves: HashMap<String, NodeId>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
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
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(m: &Matrix, i: usize, j: usize) -> f64 {
    let r = if m.rows() == 1 { 0 } else { i };
    let c = if m.cols() == 1 { 0 } else { j };
    m[(r, c)]
}

/// Sums `g` down to `shape`, undoing a broadcast.
fn reduce_to(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let r = if shape.0 == 1 { 0 } else { i };
            let c = if shape.1 == 1 { 0 } else { j };
            out[(r, c)] += g[(i, j)];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ValueNode] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].grad
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.shape()
    }

    /// Id of the named leaf (parameter or input), if present.
    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Names of all trainable leaves, sorted.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.clone()),
                _ => None,
            })
            .collect();
        names.sort();
        names
    }

    fn push_leaf(&mut self, op: Op, value: Matrix) -> NodeId {
        let id = self.nodes.len();
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(ValueNode {
            id,
            op,
            inputs: Vec::new(),
            value,
            grad,
        });
        id
    }

    /// Trainable leaf. Repeated calls with the same name return the same
    /// node, so a parameter shared across unrolled timesteps accumulates
    /// gradient from every use.
    pub fn param(&mut self, name: &str, value: &Matrix) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push_leaf(Op::Param(name.to_string()), value.clone());
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Named data leaf. Re-declaring a name overwrites its value.
    pub fn input(&mut self, name: &str, value: Matrix) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            self.nodes[id].grad = Matrix::zeros(value.rows(), value.cols());
            self.nodes[id].value = value;
            return id;
        }
        let id = self.push_leaf(Op::Input(name.to_string()), value);
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(Op::Const, value)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Matrix::scalar(value))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let id = self.nodes.len();
        let value = self.compute(id, &op, &inputs)?;
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(ValueNode {
            id,
            op,
            inputs,
            value,
            grad,
        });
        Ok(id)
    }

    fn dim_err(id: NodeId, op: &Op, detail: String) -> Error {
        Error::Dimension {
            node: id,
            op: op.name(),
            detail,
        }
    }

    fn compute(&self, id: NodeId, op: &Op, inputs: &[NodeId]) -> Result<Matrix> {
        let arg = |k: usize| &self.nodes[inputs[k]].value;
        let out = match op {
            Op::Param(_) | Op::Input(_) | Op::Const => unreachable!("leaves are not computed"),
            Op::MatMul => {
                let (a, b) = (arg(0), arg(1));
                if a.cols() != b.rows() {
                    return Err(Self::dim_err(
                        id,
                        op,
                        format!("{:?} x {:?}", a.shape(), b.shape()),
                    ));
                }
                a.matmul(b)
            }
            Op::Add | Op::Mul => {
                let (a, b) = (arg(0), arg(1));
                let (r, c) = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
                    Self::dim_err(
                        id,
                        op,
                        format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
                    )
                })?;
                if a.shape() == b.shape() {
                    if *op == Op::Add {
                        a.zip_map(b, |x, y| x + y)
                    } else {
                        a.zip_map(b, |x, y| x * y)
                    }
                } else {
                    let mut out = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            let (x, y) = (bidx(a, i, j), bidx(b, i, j));
                            out[(i, j)] = if *op == Op::Add { x + y } else { x * y };
                        }
                    }
                    out
                }
            }
            Op::Sigmoid => arg(0).map(sigmoid),
            Op::Tanh => arg(0).map(f64::tanh),
            Op::MaxZero => arg(0).map(|x| x.max(0.0)),
            Op::Softplus => arg(0).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p()),
            Op::Exp => arg(0).map(f64::exp),
            Op::Log | Op::Sqrt => {
                let a = arg(0);
                if let Some(&bad) = a.as_slice().iter().find(|&&x| !(x > 0.0)) {
                    return Err(Error::Domain {
                        node: id,
                        op: op.name(),
                        value: bad,
                    });
                }
                if *op == Op::Log {
                    a.map(f64::ln)
                } else {
                    a.map(f64::sqrt)
                }
            }
            Op::Square => arg(0).map(|x| x * x),
            Op::Softmax => softmax_rows(arg(0)),
            Op::Concat { axis } => {
                let parts: Vec<&Matrix> = (0..inputs.len()).map(arg).collect();
                if parts.is_empty() {
                    return Err(Self::dim_err(id, op, "concat of nothing".into()));
                }
                if *axis == 1 {
                    let rows = parts[0].rows();
                    if parts.iter().any(|p| p.rows() != rows) {
                        return Err(Self::dim_err(id, op, "row counts differ".into()));
                    }
                    let cols: usize = parts.iter().map(|p| p.cols()).sum();
                    let mut out = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let mut off = 0;
                        for p in &parts {
                            out.row_mut(i)[off..off + p.cols()].copy_from_slice(p.row(i));
                            off += p.cols();
                        }
                    }
                    out
                } else {
                    let cols = parts[0].cols();
                    if parts.iter().any(|p| p.cols() != cols) {
                        return Err(Self::dim_err(id, op, "column counts differ".into()));
                    }
                    let rows: usize = parts.iter().map(|p| p.rows()).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for p in &parts {
                        data.extend_from_slice(p.as_slice());
                    }
                    Matrix::from_vec(rows, cols, data)
                }
            }
            Op::Slice { rows, cols } => {
                let a = arg(0);
                if rows.end > a.rows() || cols.end > a.cols() || rows.is_empty() || cols.is_empty()
                {
                    return Err(Self::dim_err(
                        id,
                        op,
                        format!("slice {rows:?},{cols:?} of {:?}", a.shape()),
                    ));
                }
                let mut out = Matrix::zeros(rows.len(), cols.len());
                for (oi, i) in rows.clone().enumerate() {
                    out.row_mut(oi).copy_from_slice(&a.row(i)[cols.clone()]);
                }
                out
            }
            Op::Sum => Matrix::scalar(arg(0).sum()),
            Op::SumRows => {
                let a = arg(0);
                Matrix::from_vec(a.rows(), 1, (0..a.rows()).map(|i| a.row(i).iter().sum()).collect())
            }
            Op::Mean => {
                let a = arg(0);
                Matrix::scalar(a.sum() / a.len() as f64)
            }
            Op::Transpose => arg(0).transpose(),
        };
        Ok(out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::MaxZero, vec![a])
    }

    pub fn max_zero(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::MaxZero, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log, vec![a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square, vec![a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt, vec![a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax, vec![a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        assert!(axis <= 1, "concat axis must be 0 or 1");
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    pub fn slice(&mut self, a: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId> {
        self.push(Op::Slice { rows, cols }, vec![a])
    }

    /// Column range of every row.
    pub fn slice_cols(&mut self, a: NodeId, cols: Range<usize>) -> Result<NodeId> {
        let rows = self.shape(a).0;
        self.slice(a, 0..rows, cols)
    }

    /// Row range across every column.
    pub fn slice_rows(&mut self, a: NodeId, rows: Range<usize>) -> Result<NodeId> {
        let cols = self.shape(a).1;
        self.slice(a, rows, 0..cols)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![a])
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, vec![a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, vec![a])
    }

    // Composites built from the primitives above.

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.scalar(c);
        self.mul(a, k)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.scalar(c);
        self.add(a, k)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.neg(a)?;
        self.add_scalar(na, 1.0)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softplus, vec![a])
    }

    /// Element-wise `a / b` as `a * exp(-ln b)`; requires `b > 0`.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let lb = self.log(b)?;
        let nlb = self.neg(lb)?;
        let inv = self.exp(nlb)?;
        self.mul(a, inv)
    }

    /// Squared Euclidean norm of each row, `rows x 1`.
    pub fn row_sq_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.square(a)?;
        self.sum_rows(s)
    }

    /// Rebinds named leaves and re-evaluates every node in stored order.
    /// Returns the value of `root`.
    pub fn eval_forward(
        &mut self,
        root: NodeId,
        bindings: &BTreeMap<String, Matrix>,
    ) -> Result<Matrix> {
        for (name, value) in bindings {
            let id = *self
                .leaves
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no leaf named `{name}`")))?;
            self.nodes[id].value = value.clone();
        }
        for id in 0..self.nodes.len() {
            if self.nodes[id].op.is_leaf() {
                continue;
            }
            let inputs = std::mem::take(&mut self.nodes[id].inputs);
            let op = self.nodes[id].op.clone();
            let value = self.compute(id, &op, &inputs);
            self.nodes[id].inputs = inputs;
            self.nodes[id].value = value?;
        }
        Ok(self.nodes[root].value.clone())
    }

    /// Reverse sweep from a scalar root. Returns the gradient of every named
    /// leaf (parameters and inputs); gradients from all paths are summed.
    pub fn eval_backward(&mut self, root: NodeId) -> Result<BTreeMap<String, Matrix>> {
        if self.nodes[root].value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be 1x1, node {root} is {:?}",
                self.nodes[root].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = Matrix::zeros(n.value.rows(), n.value.cols());
        }
        self.nodes[root].grad = Matrix::scalar(1.0);

        for id in (0..=root).rev() {
            if self.nodes[id].op.is_leaf() {
                continue;
            }
            let g = std::mem::replace(&mut self.nodes[id].grad, Matrix::zeros(0, 0));
            if g.as_slice().iter().all(|&x| x == 0.0) {
                self.nodes[id].grad = g;
                continue;
            }
            let contributions = self.local_grads(id, &g);
            self.nodes[id].grad = g;
            for (input, contrib) in contributions {
                self.nodes[input].grad.add_assign(&contrib);
            }
        }

        let mut out = BTreeMap::new();
        for n in &self.nodes {
            match &n.op {
                Op::Param(name) | Op::Input(name) => {
                    out.insert(name.clone(), n.grad.clone());
                }
                _ => {}
            }
        }
        Ok(out)
    }

    fn local_grads(&self, id: NodeId, g: &Matrix) -> Vec<(NodeId, Matrix)> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let x = |k: usize| &self.nodes[ins[k]].value;
        let y = &node.value;
        match &node.op {
            Op::Param(_) | Op::Input(_) | Op::Const => Vec::new(),
            Op::MatMul => {
                let (a, b) = (x(0), x(1));
                vec![
                    (ins[0], g.matmul(&b.transpose())),
                    (ins[1], a.transpose().matmul(g)),
                ]
            }
            Op::Add => vec![
                (ins[0], reduce_to(g, x(0).shape())),
                (ins[1], reduce_to(g, x(1).shape())),
            ],
            Op::Mul => {
                let (a, b) = (x(0), x(1));
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                let mut gb = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga[(i, j)] = g[(i, j)] * bidx(b, i, j);
                        gb[(i, j)] = g[(i, j)] * bidx(a, i, j);
                    }
                }
                vec![
                    (ins[0], reduce_to(&ga, a.shape())),
                    (ins[1], reduce_to(&gb, b.shape())),
                ]
            }
            Op::Sigmoid => vec![(ins[0], g.zip_map(y, |gi, s| gi * s * (1.0 - s)))],
            Op::Tanh => vec![(ins[0], g.zip_map(y, |gi, t| gi * (1.0 - t * t)))],
            Op::MaxZero => vec![(
                ins[0],
                g.zip_map(x(0), |gi, v| if v > 0.0 { gi } else { 0.0 }),
            )],
            Op::Softplus => vec![(ins[0], g.zip_map(x(0), |gi, v| gi * sigmoid(v)))],
            Op::Exp => vec![(ins[0], g.zip_map(y, |gi, e| gi * e))],
            Op::Log => vec![(ins[0], g.zip_map(x(0), |gi, v| gi / v))],
            Op::Square => vec![(ins[0], g.zip_map(x(0), |gi, v| 2.0 * gi * v))],
            Op::Sqrt => vec![(ins[0], g.zip_map(y, |gi, s| gi / (2.0 * s)))],
            Op::Softmax => {
                let mut out = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, (gv, yv)) in out.row_mut(i).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(ins[0], out)]
            }
            Op::Concat { axis } => {
                let mut out = Vec::with_capacity(ins.len());
                let mut off = 0;
                for &inp in ins {
                    let (r, c) = self.nodes[inp].value.shape();
                    let mut part = Matrix::zeros(r, c);
                    if *axis == 1 {
                        for i in 0..r {
                            part.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        off += c;
                    } else {
                        for i in 0..r {
                            part.row_mut(i).copy_from_slice(g.row(off + i));
                        }
                        off += r;
                    }
                    out.push((inp, part));
                }
                out
            }
            Op::Slice { rows, cols } => {
                let (r, c) = x(0).shape();
                let mut out = Matrix::zeros(r, c);
                for (gi, i) in rows.clone().enumerate() {
                    out.row_mut(i)[cols.clone()].copy_from_slice(g.row(gi));
                }
                vec![(ins[0], out)]
            }
            Op::Sum => {
                let (r, c) = x(0).shape();
                vec![(ins[0], Matrix::filled(r, c, g.item()))]
            }
            Op::SumRows => {
                let (r, c) = x(0).shape();
                let mut out = Matrix::zeros(r, c);
                for i in 0..r {
                    out.row_mut(i).fill(g[(i, 0)]);
                }
                vec![(ins[0], out)]
            }
            Op::Mean => {
                let (r, c) = x(0).shape();
                vec![(ins[0], Matrix::filled(r, c, g.item() / (r * c) as f64))]
            }
            Op::Transpose => vec![(ins[0], g.transpose())],
        }
    }
}
