//! Operation tape with eager forward evaluation and reverse-mode backward.
//!
//! A [`Graph`] owns every node it creates; [`Var`] is a handle into it.
//! Values are computed when an op is inserted, and the whole tape can be
//! re-evaluated with [`Graph::forward`] after [`Graph::set_input`], which is
//! what the finite-difference checker relies on. All reductions run
//! left-to-right over the flat index.

use super::{NdError, Result, Tensor, LOG_EPS};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How a binary elementwise op lines up its two operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BcastKind {
    /// Shapes identical.
    Same,
    /// One-element operand applied everywhere.
    Scalar,
    /// `[d]` stretched over the rows of `[n, d]`.
    Row,
    /// `[n, 1]` stretched over the columns of `[n, d]`.
    Col,
}

/// Which operand (if any) is the broadcast one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BcastSide {
    None,
    Lhs(BcastKind),
    Rhs(BcastKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Bin(BinOp, Var, Var, BcastSide),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softplus(Var, f64),
    Scale(Var, f64),
    Softmax(Var),
    LogSumExp(Var),
    ZeroMean(Var),
    RowDot(Var, Var),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanAxis0(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to graph nodes.
///
/// Only nodes on a differentiable path from a grad-requiring input receive an
/// entry; constants never do.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    work: u64,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Element-evaluation count accumulated by every forward computation on
    /// this graph. Deterministic for a fixed op sequence.
    pub fn work(&self) -> u64 {
        self.work
    }

    /// Leaf node whose gradient is tracked when the tensor requires grad.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(Node {
            op: Op::Input,
            value: t,
            needs_grad,
        })
    }

    /// Leaf node that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Node {
            op: Op::Constant,
            value: t,
            needs_grad: false,
        })
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Replace the value of an `Input` node. Shape must match.
    pub fn set_input(&mut self, v: Var, t: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        match node.op {
            Op::Input => {
                if node.value.shape() != t.shape() {
                    return Err(NdError::ShapeMismatch {
                        op: "set_input",
                        lhs: node.value.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                let requires = node.value.requires_grad();
                node.value = if requires { t.with_grad() } else { t };
                Ok(())
            }
            _ => Err(NdError::Structural(
                "set_input target is not an input node".into(),
            )),
        }
    }

    /// Overwrite a single coordinate of an `Input` node (finite differences).
    pub fn nudge_input(&mut self, v: Var, coord: usize, value: f64) -> Result<()> {
        let node = &mut self.nodes[v.0];
        match node.op {
            Op::Input => {
                node.value.data_mut()[coord] = value;
                Ok(())
            }
            _ => Err(NdError::Structural(
                "nudge target is not an input node".into(),
            )),
        }
    }

    /// Re-evaluate every non-leaf node in insertion order.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            match node.op {
                Op::Input | Op::Constant => {}
                _ => {
                    let (value, cost) = eval_op(done, &node.op)?;
                    node.value = value;
                    self.work += cost;
                }
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinOp::Mul, a, b)
    }

    fn bin(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let side = classify_broadcast(
            bin_name(op),
            self.value(a).shape(),
            self.value(b).shape(),
        )?;
        self.insert(Op::Bin(op, a, b, side))
    }

    /// `[m,k] @ [k,n] -> [m,n]`, or `[m,k] @ [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.insert(Op::MatMul(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.insert(Op::Exp(a))
    }

    /// Natural log with the [`LOG_EPS`] floor. Negative entries are a domain
    /// error; zeros are floored.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.insert(Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.insert(Op::Relu(a))
    }

    /// `(1/beta) * ln(1 + exp(beta * x))`, evaluated stably.
    pub fn softplus(&mut self, a: Var, sharpness: f64) -> Result<Var> {
        if sharpness <= 0.0 {
            return Err(NdError::NumericDomain {
                op: "softplus",
                detail: format!("sharpness must be positive, got {sharpness}"),
            });
        }
        self.insert(Op::Softplus(a, sharpness))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.insert(Op::Scale(a, c))
    }

    /// Softmax along the last axis; rows of a matrix, or a whole vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.insert(Op::Softmax(a))
    }

    /// Log-sum-exp along the last axis: `[n,d] -> [n,1]`, `[d] -> scalar`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.insert(Op::LogSumExp(a))
    }

    /// Subtract the per-row mean along the last axis.
    pub fn zero_mean(&mut self, a: Var) -> Result<Var> {
        self.insert(Op::ZeroMean(a))
    }

    /// Row-wise inner product: `[n,d] . [n,d] -> [n,1]`, `[d] . [d] -> scalar`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.insert(Op::RowDot(a, b))
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.insert(Op::Concat(a, b))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.insert(Op::Sum(a))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.insert(Op::Mean(a))
    }

    /// Column means of a matrix: `[n,d] -> [d]`.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        self.insert(Op::MeanAxis0(a))
    }

    fn insert(&mut self, op: Op) -> Result<Var> {
        let (value, cost) = eval_op(&self.nodes, &op)?;
        self.work += cost;
        let needs_grad = op_inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(Node {
            op,
            value,
            needs_grad,
        }))
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode gradients of a scalar `output` node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.numel() != 1 {
            return Err(NdError::NonScalarOutput(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !out_node.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::filled(out_node.value.shape().to_vec(), 1.0));

        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(adj) = grads[i].take() else { continue };
            self.accumulate(i, &adj, &mut grads);
            grads[i] = Some(adj);
        }
        Ok(Gradients { grads })
    }

    /// Push the adjoint of node `i` into its inputs.
    fn accumulate(&self, i: usize, adj: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = adj.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::Bin(op, a, b, side) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let ga = ensure(grads, a.0, av.shape());
                    for (idx, &gi) in g.iter().enumerate() {
                        let (ia, ib) = bin_index(*side, idx, av, bv);
                        let d = match op {
                            BinOp::Add | BinOp::Sub => 1.0,
                            BinOp::Mul => bv.data()[ib],
                        };
                        ga.data_mut()[ia] += d * gi;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let gb = ensure(grads, b.0, bv.shape());
                    for (idx, &gi) in g.iter().enumerate() {
                        let (ia, ib) = bin_index(*side, idx, av, bv);
                        let d = match op {
                            BinOp::Add => 1.0,
                            BinOp::Sub => -1.0,
                            BinOp::Mul => av.data()[ia],
                        };
                        gb.data_mut()[ib] += d * gi;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let vec_rhs = bv.shape().len() == 1;
                let n = if vec_rhs { 1 } else { bv.shape()[1] };
                if self.nodes[a.0].needs_grad {
                    let ga = ensure(grads, a.0, av.shape());
                    let gad = ga.data_mut();
                    for i in 0..m {
                        for j in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += g[i * n + c] * bv.data()[j * n + c];
                            }
                            gad[i * k + j] += s;
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let gb = ensure(grads, b.0, bv.shape());
                    let gbd = gb.data_mut();
                    for j in 0..k {
                        for c in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av.data()[i * k + j] * g[i * n + c];
                            }
                            gbd[j * n + c] += s;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if self.nodes[a.0].needs_grad {
                    let y = node.value.data();
                    let ga = ensure(grads, a.0, self.value(*a).shape());
                    for (idx, &gi) in g.iter().enumerate() {
                        ga.data_mut()[idx] += y[idx] * gi;
                    }
                }
            }
            Op::Log(a) => {
                if self.nodes[a.0].needs_grad {
                    let xv = self.value(*a).data().to_vec();
                    let ga = ensure(grads, a.0, self.value(*a).shape());
                    for (idx, &gi) in g.iter().enumerate() {
                        ga.data_mut()[idx] += gi / xv[idx].max(LOG_EPS);
                    }
                }
            }
            Op::Relu(a) => {
                if self.nodes[a.0].needs_grad {
                    let xv = self.value(*a).data().to_vec();
                    let ga = ensure(grads, a.0, self.value(*a).shape());
                    for (idx, &gi) in g.iter().enumerate() {
                        if xv[idx] > 0.0 {
                            ga.data_mut()[idx] += gi;
                        }
                    }
                }
            }
            Op::Softplus(a, beta) => {
                if self.nodes[a.0].needs_grad {
                    let xv = self.value(*a).data().to_vec();
                    let ga = ensure(grads, a.0, self.value(*a).shape());
                    for (idx, &gi) in g.iter().enumerate() {
                        ga.data_mut()[idx] += sigmoid(beta * xv[idx]) * gi;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a.0].needs_grad {
                    let ga = ensure(grads, a.0, self.value(*a).shape());
                    for (idx, &gi) in g.iter().enumerate() {
                        ga.data_mut()[idx] += c * gi;
                    }
                }
            }
            Op::Softmax(a) => {
                if self.nodes[a.0].needs_grad {
                    let y = node.value.data().to_vec();
                    let d = *node.value.shape().last().unwrap();
                    let ga = ensure(grads, a.0, self.value(*a).shape());
                    for r in 0..y.len() / d {
                        let row = &y[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let inner: f64 = (0..d).map(|j| grow[j] * row[j]).sum();
                        for j in 0..d {
                            ga.data_mut()[r * d + j] += row[j] * (grow[j] - inner);
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                if self.nodes[a.0].needs_grad {
                    let xv = self.value(*a).data().to_vec();
                    let d = *self.value(*a).shape().last().unwrap();
                    let out = node.value.data().to_vec();
                    let ga = ensure(grads, a.0, self.value(*a).shape());
                    for r in 0..xv.len() / d {
                        for j in 0..d {
                            let sm = (xv[r * d + j] - out[r]).exp();
                            ga.data_mut()[r * d + j] += g[r] * sm;
                        }
                    }
                }
            }
            Op::ZeroMean(a) => {
                if self.nodes[a.0].needs_grad {
                    let d = *self.value(*a).shape().last().unwrap();
                    let ga = ensure(grads, a.0, self.value(*a).shape());
                    for r in 0..g.len() / d {
                        let grow = &g[r * d..(r + 1) * d];
                        let mean: f64 = grow.iter().sum::<f64>() / d as f64;
                        for j in 0..d {
                            ga.data_mut()[r * d + j] += grow[j] - mean;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = *av.shape().last().unwrap();
                if self.nodes[a.0].needs_grad {
                    let ga = ensure(grads, a.0, av.shape());
                    for r in 0..av.numel() / d {
                        for j in 0..d {
                            ga.data_mut()[r * d + j] += g[r] * bv.data()[r * d + j];
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let gb = ensure(grads, b.0, bv.shape());
                    for r in 0..bv.numel() / d {
                        for j in 0..d {
                            gb.data_mut()[r * d + j] += g[r] * av.data()[r * d + j];
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let p = *av.shape().last().unwrap();
                let q = *bv.shape().last().unwrap();
                let rows = av.numel() / p;
                if self.nodes[a.0].needs_grad {
                    let ga = ensure(grads, a.0, av.shape());
                    for r in 0..rows {
                        for j in 0..p {
                            ga.data_mut()[r * p + j] += g[r * (p + q) + j];
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let gb = ensure(grads, b.0, bv.shape());
                    for r in 0..rows {
                        for j in 0..q {
                            gb.data_mut()[r * q + j] += g[r * (p + q) + p + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.nodes[a.0].needs_grad {
                    let ga = ensure(grads, a.0, self.value(*a).shape());
                    for v in ga.data_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if self.nodes[a.0].needs_grad {
                    let n = self.value(*a).numel() as f64;
                    let ga = ensure(grads, a.0, self.value(*a).shape());
                    for v in ga.data_mut() {
                        *v += g[0] / n;
                    }
                }
            }
            Op::MeanAxis0(a) => {
                if self.nodes[a.0].needs_grad {
                    let shape = self.value(*a).shape().to_vec();
                    let (n, d) = (shape[0], shape[1]);
                    let ga = ensure(grads, a.0, &shape);
                    for r in 0..n {
                        for j in 0..d {
                            ga.data_mut()[r * d + j] += g[j] / n as f64;
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bin_name(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Constant => vec![],
        Op::Bin(_, a, b, _) | Op::MatMul(a, b) | Op::RowDot(a, b) | Op::Concat(a, b) => {
            vec![*a, *b]
        }
        Op::Exp(a)
        | Op::Log(a)
        | Op::Relu(a)
        | Op::Softplus(a, _)
        | Op::Scale(a, _)
        | Op::Softmax(a)
        | Op::LogSumExp(a)
        | Op::ZeroMean(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::MeanAxis0(a) => vec![*a],
    }
}

fn classify_broadcast(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<BcastSide> {
    let mismatch = || NdError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    };
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if lhs == rhs {
        return Ok(BcastSide::None);
    }
    if numel(rhs) == 1 && rhs.len() <= 1 {
        return Ok(BcastSide::Rhs(BcastKind::Scalar));
    }
    if numel(lhs) == 1 && lhs.len() <= 1 {
        return Ok(BcastSide::Lhs(BcastKind::Scalar));
    }
    match (lhs.len(), rhs.len()) {
        (2, 1) if rhs[0] == lhs[1] => Ok(BcastSide::Rhs(BcastKind::Row)),
        (1, 2) if lhs[0] == rhs[1] => Ok(BcastSide::Lhs(BcastKind::Row)),
        (2, 2) if rhs[0] == lhs[0] && rhs[1] == 1 => Ok(BcastSide::Rhs(BcastKind::Col)),
        (2, 2) if lhs[0] == rhs[0] && lhs[1] == 1 => Ok(BcastSide::Lhs(BcastKind::Col)),
        _ => Err(mismatch()),
    }
}

/// Map an output flat index to (lhs index, rhs index) under a broadcast.
fn bin_index(side: BcastSide, idx: usize, av: &Tensor, bv: &Tensor) -> (usize, usize) {
    match side {
        BcastSide::None => (idx, idx),
        BcastSide::Rhs(kind) => (idx, bcast_index(kind, idx, av.shape())),
        BcastSide::Lhs(kind) => (bcast_index(kind, idx, bv.shape()), idx),
    }
}

/// Index into the broadcast operand given the full operand's shape.
fn bcast_index(kind: BcastKind, idx: usize, full: &[usize]) -> usize {
    match kind {
        BcastKind::Scalar => 0,
        BcastKind::Row => idx % full[1],
        BcastKind::Col => idx / full[1],
    }
}

/// Compute an op's value from already-evaluated nodes. Returns the value and
/// an element-evaluation cost.
fn eval_op(nodes: &[Node], op: &Op) -> Result<(Tensor, u64)> {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Input | Op::Constant => unreachable!("leaves are never re-evaluated"),
        Op::Bin(bop, a, b, side) => {
            let (av, bv) = (val(a), val(b));
            let out_shape = match side {
                BcastSide::None | BcastSide::Rhs(_) => av.shape().to_vec(),
                BcastSide::Lhs(_) => bv.shape().to_vec(),
            };
            let numel: usize = out_shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for idx in 0..numel {
                let (ia, ib) = bin_index(*side, idx, av, bv);
                let (x, y) = (av.data()[ia], bv.data()[ib]);
                data.push(match bop {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                });
            }
            Ok((Tensor::new(out_shape, data)?, numel as u64))
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if av.shape().len() != 2 {
                return Err(NdError::ShapeMismatch {
                    op: "matmul",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let (n, out_shape) = match bv.shape() {
                [rows, cols] if *rows == k => (*cols, vec![m, *cols]),
                [rows] if *rows == k => (1, vec![m]),
                _ => {
                    return Err(NdError::ShapeMismatch {
                        op: "matmul",
                        lhs: av.shape().to_vec(),
                        rhs: bv.shape().to_vec(),
                    })
                }
            };
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for c in 0..k {
                        s += av.data()[i * k + c] * bv.data()[c * n + j];
                    }
                    data[i * n + j] = s;
                }
            }
            Ok((Tensor::new(out_shape, data)?, (m * n * k) as u64))
        }
        Op::Exp(a) => {
            let av = val(a);
            let data = av.data().iter().map(|x| x.exp()).collect();
            Ok((Tensor::new(av.shape().to_vec(), data)?, av.numel() as u64))
        }
        Op::Log(a) => {
            let av = val(a);
            if let Some((i, x)) = av.data().iter().enumerate().find(|(_, x)| **x < 0.0) {
                return Err(NdError::NumericDomain {
                    op: "log",
                    detail: format!("negative argument {x} at flat index {i}"),
                });
            }
            let data = av.data().iter().map(|x| x.max(LOG_EPS).ln()).collect();
            Ok((Tensor::new(av.shape().to_vec(), data)?, av.numel() as u64))
        }
        Op::Relu(a) => {
            let av = val(a);
            let data = av.data().iter().map(|x| x.max(0.0)).collect();
            Ok((Tensor::new(av.shape().to_vec(), data)?, av.numel() as u64))
        }
        Op::Softplus(a, beta) => {
            let av = val(a);
            let data = av
                .data()
                .iter()
                .map(|x| x.max(0.0) + (-(beta * x).abs()).exp().ln_1p() / beta)
                .collect();
            Ok((Tensor::new(av.shape().to_vec(), data)?, av.numel() as u64))
        }
        Op::Scale(a, c) => {
            let av = val(a);
            let data = av.data().iter().map(|x| c * x).collect();
            Ok((Tensor::new(av.shape().to_vec(), data)?, av.numel() as u64))
        }
        Op::Softmax(a) => {
            let av = val(a);
            let d = last_axis(av, "softmax")?;
            let mut data = vec![0.0; av.numel()];
            for r in 0..av.numel() / d {
                let row = &av.data()[r * d..(r + 1) * d];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..d {
                    let e = (row[j] - m).exp();
                    data[r * d + j] = e;
                    z += e;
                }
                for j in 0..d {
                    data[r * d + j] /= z;
                }
            }
            Ok((Tensor::new(av.shape().to_vec(), data)?, av.numel() as u64))
        }
        Op::LogSumExp(a) => {
            let av = val(a);
            let d = last_axis(av, "logsumexp")?;
            let rows = av.numel() / d;
            let out_shape = if av.shape().len() == 1 {
                vec![]
            } else {
                vec![rows, 1]
            };
            let mut data = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &av.data()[r * d..(r + 1) * d];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
                data.push(m + s.ln());
            }
            Ok((Tensor::new(out_shape, data)?, av.numel() as u64))
        }
        Op::ZeroMean(a) => {
            let av = val(a);
            let d = last_axis(av, "zero_mean")?;
            let mut data = vec![0.0; av.numel()];
            for r in 0..av.numel() / d {
                let row = &av.data()[r * d..(r + 1) * d];
                let mean: f64 = row.iter().sum::<f64>() / d as f64;
                for j in 0..d {
                    data[r * d + j] = row[j] - mean;
                }
            }
            Ok((Tensor::new(av.shape().to_vec(), data)?, av.numel() as u64))
        }
        Op::RowDot(a, b) => {
            let (av, bv) = (val(a), val(b));
            if av.shape() != bv.shape() || av.shape().is_empty() {
                return Err(NdError::ShapeMismatch {
                    op: "dot",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            let d = *av.shape().last().unwrap();
            let rows = av.numel() / d;
            let out_shape = if av.shape().len() == 1 {
                vec![]
            } else {
                vec![rows, 1]
            };
            let mut data = Vec::with_capacity(rows);
            for r in 0..rows {
                let mut s = 0.0;
                for j in 0..d {
                    s += av.data()[r * d + j] * bv.data()[r * d + j];
                }
                data.push(s);
            }
            Ok((Tensor::new(out_shape, data)?, av.numel() as u64))
        }
        Op::Concat(a, b) => {
            let (av, bv) = (val(a), val(b));
            let out = match (av.shape(), bv.shape()) {
                ([p], [q]) => {
                    let mut data = av.data().to_vec();
                    data.extend_from_slice(bv.data());
                    Tensor::new(vec![p + q], data)?
                }
                ([n1, p], [n2, q]) if n1 == n2 => {
                    let mut data = Vec::with_capacity(n1 * (p + q));
                    for r in 0..*n1 {
                        data.extend_from_slice(&av.data()[r * p..(r + 1) * p]);
                        data.extend_from_slice(&bv.data()[r * q..(r + 1) * q]);
                    }
                    Tensor::new(vec![*n1, p + q], data)?
                }
                _ => {
                    return Err(NdError::ShapeMismatch {
                        op: "concat",
                        lhs: av.shape().to_vec(),
                        rhs: bv.shape().to_vec(),
                    })
                }
            };
            let cost = out.numel() as u64;
            Ok((out, cost))
        }
        Op::Sum(a) => {
            let av = val(a);
            let mut s = 0.0;
            for x in av.data() {
                s += x;
            }
            Ok((Tensor::scalar(s), av.numel() as u64))
        }
        Op::Mean(a) => {
            let av = val(a);
            let mut s = 0.0;
            for x in av.data() {
                s += x;
            }
            Ok((Tensor::scalar(s / av.numel() as f64), av.numel() as u64))
        }
        Op::MeanAxis0(a) => {
            let av = val(a);
            if av.shape().len() != 2 {
                return Err(NdError::ShapeMismatch {
                    op: "mean_axis0",
                    lhs: av.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (n, d) = (av.shape()[0], av.shape()[1]);
            let mut data = vec![0.0; d];
            for r in 0..n {
                for j in 0..d {
                    data[j] += av.data()[r * d + j];
                }
            }
            for v in &mut data {
                *v /= n as f64;
            }
            Ok((Tensor::new(vec![d], data)?, av.numel() as u64))
        }
    }
}

fn last_axis(t: &Tensor, op: &'static str) -> Result<usize> {
    match t.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(NdError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

fn ensure<'a>(grads: &'a mut [Option<Tensor>], idx: usize, shape: &[usize]) -> &'a mut Tensor {
    if grads[idx].is_none() {
        grads[idx] = Some(Tensor::zeros(shape.to_vec()));
    }
    grads[idx].as_mut().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let eye = g.constant(
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let v = g.constant(Tensor::vector(vec![2.0, -1.5, 0.25]));
        let out = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, -1.5, 0.25]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0; 4]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            close(p, 0.25, 1e-15);
        }
    }

    #[test]
    fn softmax_is_probability_vector() {
        let mut g = Graph::new();
        let x = g.constant(
            Tensor::new(vec![2, 3], vec![3.0, -1.0, 0.5, 100.0, 99.0, 98.0]).unwrap(),
        );
        let y = g.softmax(x).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            close(row.iter().sum::<f64>(), 1.0, 1e-12);
        }
    }

    #[test]
    fn softplus_sharpness_three_at_zero() {
        // (1/3) * ln 2
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.softplus(x, 3.0).unwrap();
        close(g.value(y).item(), 2.0_f64.ln() / 3.0, 1e-12);
        close(g.value(y).item(), 0.231049, 1e-6);
    }

    #[test]
    fn logsumexp_translation_stable() {
        let xs = vec![0.3, -2.0, 1.7, 0.0, 5.5];
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(xs.clone()));
        let la = g.logsumexp(a).unwrap();
        let base = g.value(la).item();

        let c = 123.456;
        let mut g2 = Graph::new();
        let b = g2.constant(Tensor::vector(xs.iter().map(|x| x + c).collect()));
        let lb = g2.logsumexp(b).unwrap();
        close(g2.value(lb).item(), base + c, 1e-10);
    }

    #[test]
    fn backward_square_at_three() {
        // d/dx (x*x) = 2x
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0).with_grad());
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        close(grads.wrt(x).unwrap().item(), 6.0, 1e-12);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(NdError::NonScalarOutput(_))));
    }

    #[test]
    fn cross_entropy_gradient_closed_form() {
        // d CE(softmax(z), onehot(k)) / dz = softmax(z) - onehot(k)
        let z = vec![0.7, -0.3, 1.1, 0.2];
        let k = 2;
        let mut g = Graph::new();
        let zin = g.input(Tensor::vector(z.clone()).with_grad());
        let lse = g.logsumexp(zin).unwrap();
        let onehot = {
            let mut m = vec![0.0; 4];
            m[k] = 1.0;
            g.constant(Tensor::vector(m))
        };
        let picked = g.dot(zin, onehot).unwrap();
        let ce = g.sub(lse, picked).unwrap();
        let grads = g.backward(ce).unwrap();

        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let zsum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        for (j, &gv) in grads.wrt(zin).unwrap().data().iter().enumerate() {
            let sm = (z[j] - m).exp() / zsum;
            let expect = sm - if j == k { 1.0 } else { 0.0 };
            close(gv, expect, 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn broadcast_row_and_col() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let row = g.constant(Tensor::vector(vec![10., 20., 30.]));
        let col = g.constant(Tensor::new(vec![2, 1], vec![100., 200.]).unwrap());
        let a = g.add(m, row).unwrap();
        assert_eq!(g.value(a).data(), &[11., 22., 33., 14., 25., 36.]);
        let b = g.add(m, col).unwrap();
        assert_eq!(g.value(b).data(), &[101., 102., 103., 204., 205., 206.]);
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(
            g.add(a, b),
            Err(NdError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn log_rejects_negative_floors_zero() {
        let mut g = Graph::new();
        let bad = g.constant(Tensor::vector(vec![0.5, -0.1]));
        assert!(matches!(g.log(bad), Err(NdError::NumericDomain { .. })));

        let ok = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let y = g.log(ok).unwrap();
        close(g.value(y).data()[0], LOG_EPS.ln(), 1e-9);
        close(g.value(y).data()[1], 0.0, 1e-15);
    }

    #[test]
    fn set_input_and_forward_reevaluate() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 4.0);
        g.set_input(x, Tensor::scalar(5.0)).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(y).item(), 25.0);
    }

    #[test]
    fn forward_outputs_stay_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![700.0, -700.0, 0.0]));
        let s = g.softmax(x).unwrap();
        let l = g.logsumexp(x).unwrap();
        let sp = g.softplus(x, 3.0).unwrap();
        assert!(g.value(s).all_finite());
        assert!(g.value(l).all_finite());
        assert!(g.value(sp).all_finite());
    }
}
