//! Arena-backed computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in creation order and may only reference earlier
//! nodes, so reverse creation order is a topological order for backward.

use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a node.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Leaf,
    Matmul,
    Add,
    Mul,
    Relu,
    Tanh,
    Sigmoid,
    SoftmaxLastdim,
    LogSoftmaxLastdim,
    Log,
    Sum,
    Mean,
    ConcatLastdim,
    Scale(f64),
    /// Element `k` of a vector, as a scalar.
    Pick(usize),
    /// Forward value is supplied, gradient passes unchanged to the single input.
    StraightThrough,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::SoftmaxLastdim => "softmax_lastdim",
            OpKind::LogSoftmaxLastdim => "log_softmax_lastdim",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ConcatLastdim => "concat_lastdim",
            OpKind::Scale(_) => "scale",
            OpKind::Pick(_) => "pick",
            OpKind::StraightThrough => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: OpKind,
    inputs: Vec<NodeId>,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// How an operand of a broadcasting binary op maps onto the output.
#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    Row(usize),
}

impl Bcast {
    #[inline]
    fn at(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row(n) => i % n,
        }
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    strict: bool,
    params: HashMap<String, NodeId>,
    visits: Vec<u32>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that rejects non-finite values as soon as they appear.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), strict: true, params: HashMap::new(), visits: Vec::new() }
    }

    /// A graph that lets NaN/inf propagate.
    pub fn permissive() -> Self {
        Self { strict: false, ..Self::new() }
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(value, OpKind::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// Registers a named trainable leaf. Binding the same name twice returns
    /// the first node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let id = self.leaf(value.clone(), true)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Gradient of a named parameter after [`Graph::backward`]. A bound
    /// parameter the loss does not depend on reports zeros.
    pub fn param_grad(&self, name: &str) -> Option<Tensor> {
        let id = self.param_id(name)?;
        let node = &self.nodes[id.0];
        Some(node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape())))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn op(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Number of times backward processed this node in the last pass.
    pub fn visit_count(&self, id: NodeId) -> u32 {
        self.visits.get(id.0).copied().unwrap_or(0)
    }

    fn push(
        &mut self,
        value: Tensor,
        op: OpKind,
        inputs: Vec<NodeId>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        if self.strict && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let id = self.nodes.len();
        if inputs.iter().any(|i| i.0 >= id) {
            return Err(Error::Cycle(id));
        }
        self.nodes.push(Node { value, op, inputs, requires_grad, grad: None });
        Ok(NodeId(id))
    }

    fn any_grad(&self, inputs: &[NodeId]) -> bool {
        inputs.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    fn shape_err(&self, op: &'static str, ids: &[NodeId]) -> Error {
        Error::Shape { op, shapes: ids.iter().map(|i| self.value(*i).shape().to_vec()).collect() }
    }

    /// Generic entry point: applies `kind` to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity_ok = match kind {
            OpKind::Leaf | OpKind::StraightThrough => false,
            OpKind::Matmul | OpKind::Add | OpKind::Mul => inputs.len() == 2,
            OpKind::ConcatLastdim => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::InvalidArgument(format!(
                "{} does not take {} input(s) here",
                kind.name(),
                inputs.len()
            )));
        }
        let value = self.forward_value(&kind, inputs)?;
        let rg = self.any_grad(inputs);
        self.push(value, kind, inputs.to_vec(), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SoftmaxLastdim, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::LogSoftmaxLastdim, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::ConcatLastdim, parts)
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn pick(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        self.apply(OpKind::Pick(k), &[a])
    }

    /// A node whose value is `forward` but whose gradient flows to `soft` as
    /// if it were the identity.
    pub fn straight_through(&mut self, soft: NodeId, forward: Tensor) -> Result<NodeId> {
        if forward.shape() != self.value(soft).shape() {
            let mut shapes = vec![self.value(soft).shape().to_vec()];
            shapes.push(forward.shape().to_vec());
            return Err(Error::Shape { op: "straight_through", shapes });
        }
        let rg = self.requires_grad(soft);
        self.push(forward, OpKind::StraightThrough, vec![soft], rg)
    }

    fn bcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            return Ok((sa.to_vec(), Bcast::Same, Bcast::Same));
        }
        // `small` broadcasts onto `big` if it is a scalar or one row of it.
        let fits = |small: &[usize], big: &[usize]| -> Option<Bcast> {
            if small.iter().product::<usize>() == 1 && small.len() <= 1 {
                return Some(Bcast::Scalar);
            }
            if big.len() == 2 {
                let row = &big[1..];
                if small == row || (small.len() == 2 && small[0] == 1 && small[1..] == *row) {
                    return Some(Bcast::Row(big[1]));
                }
            }
            None
        };
        if let Some(m) = fits(sb, sa) {
            return Ok((sa.to_vec(), Bcast::Same, m));
        }
        if let Some(m) = fits(sa, sb) {
            return Ok((sb.to_vec(), m, Bcast::Same));
        }
        Err(self.shape_err(op, &[a, b]))
    }

    fn forward_value(&self, kind: &OpKind, inputs: &[NodeId]) -> Result<Tensor> {
        let x = self.value(inputs[0]);
        let out = match kind {
            OpKind::Matmul => {
                let y = self.value(inputs[1]);
                if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
                    return Err(self.shape_err("matmul", inputs));
                }
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let mut out = vec![0.0; m * n];
                let (xd, yd) = (x.data(), y.data());
                for i in 0..m {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let xv = xd[i * k + p];
                        let yrow = &yd[p * n..(p + 1) * n];
                        for (o, &yv) in orow.iter_mut().zip(yrow) {
                            *o += xv * yv;
                        }
                    }
                }
                Tensor::new(vec![m, n], out)?
            }
            OpKind::Add | OpKind::Mul => {
                let (shape, ba, bb) = self.bcast(kind.name(), inputs[0], inputs[1])?;
                let (xd, yd) = (x.data(), self.value(inputs[1]).data());
                let numel = shape.iter().product();
                let data = (0..numel)
                    .map(|i| {
                        let (u, v) = (xd[ba.at(i)], yd[bb.at(i)]);
                        if *kind == OpKind::Add {
                            u + v
                        } else {
                            u * v
                        }
                    })
                    .collect();
                Tensor::new(shape, data)?
            }
            OpKind::Relu => x.map(|v| v.max(0.0)),
            OpKind::Tanh => x.map(f64::tanh),
            OpKind::Sigmoid => x.map(sigmoid),
            OpKind::Log => x.map(f64::ln),
            OpKind::Scale(c) => x.map(|v| v * c),
            OpKind::SoftmaxLastdim | OpKind::LogSoftmaxLastdim => {
                if x.rank() == 0 {
                    return Err(self.shape_err(kind.name(), inputs));
                }
                let cols = x.last_dim();
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(cols) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    if *kind == OpKind::SoftmaxLastdim {
                        for v in row.iter_mut() {
                            *v = (*v - max).exp() / z;
                        }
                    } else {
                        let lse = max + z.ln();
                        for v in row.iter_mut() {
                            *v -= lse;
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), out)?
            }
            OpKind::Sum => Tensor::scalar(x.data().iter().sum()),
            OpKind::Mean => {
                if x.numel() == 0 {
                    return Err(self.shape_err("mean", inputs));
                }
                Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
            }
            OpKind::Pick(k) => {
                if x.rank() != 1 || *k >= x.numel() {
                    return Err(self.shape_err("pick", inputs));
                }
                Tensor::scalar(x.data()[*k])
            }
            OpKind::ConcatLastdim => {
                let parts: Vec<&Tensor> = inputs.iter().map(|i| self.value(*i)).collect();
                let rank = parts[0].rank();
                let lead = &parts[0].shape()[..rank.saturating_sub(1)];
                if rank == 0 || parts.iter().any(|p| p.rank() != rank || &p.shape()[..rank - 1] != lead) {
                    return Err(self.shape_err("concat_lastdim", inputs));
                }
                let rows = parts[0].numel() / parts[0].last_dim().max(1);
                let total: usize = parts.iter().map(|p| p.last_dim()).sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in &parts {
                        let c = p.last_dim();
                        data.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(total);
                Tensor::new(shape, data)?
            }
            OpKind::Leaf | OpKind::StraightThrough => unreachable!("not applicable"),
        };
        if self.strict && !out.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        Ok(out)
    }

    /// Populates gradients of every reachable trainable leaf with
    /// d(loss)/d(leaf). Intermediate gradients are dropped after use.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 || loss_shape.len() > 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.visits = vec![0; self.nodes.len()];
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Tensor::full(&loss_shape, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            self.visits[id] += 1;
            if self.nodes[id].inputs.iter().any(|i| i.0 >= id) {
                return Err(Error::Cycle(id));
            }
            if self.nodes[id].op == OpKind::Leaf {
                self.nodes[id].grad = Some(g);
                continue;
            }
            let contributions = self.input_grads(id, &g)?;
            let inputs = self.nodes[id].inputs.clone();
            for (input, contrib) in inputs.into_iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                match &mut pending[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for each of its inputs.
    fn input_grads(&self, id: usize, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let node = &self.nodes[id];
        let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let x = self.value(node.inputs[0]);
        let y = &node.value;
        let gd = g.data();
        let unary = |f: &dyn Fn(usize) -> f64| -> Result<Vec<Option<Tensor>>> {
            if !wants(0) {
                return Ok(vec![None]);
            }
            let data = (0..x.numel()).map(f).collect();
            Ok(vec![Some(Tensor::new(x.shape().to_vec(), data)?)])
        };
        match &node.op {
            OpKind::Leaf => Ok(Vec::new()),
            OpKind::Matmul => {
                let w = self.value(node.inputs[1]);
                let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                let (xd, wd) = (x.data(), w.data());
                let ga = wants(0).then(|| {
                    let mut out = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gd[i * n + j] * wd[p * n + j];
                            }
                            out[i * k + p] = acc;
                        }
                    }
                    Tensor::new(vec![m, k], out)
                });
                let gb = wants(1).then(|| {
                    let mut out = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let xv = xd[i * k + p];
                            for j in 0..n {
                                out[p * n + j] += xv * gd[i * n + j];
                            }
                        }
                    }
                    Tensor::new(vec![k, n], out)
                });
                Ok(vec![ga.transpose()?, gb.transpose()?])
            }
            OpKind::Add | OpKind::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (_, ba, bb) = self.bcast(node.op.name(), a, b)?;
                let (av, bv) = (self.value(a), self.value(b));
                let is_mul = node.op == OpKind::Mul;
                let reduce = |k: usize, map: Bcast, own: &Tensor, other: &Tensor, omap: Bcast| {
                    if !wants(k) {
                        return Ok(None);
                    }
                    let mut out = Tensor::zeros(own.shape());
                    let od = out.data_mut();
                    for (i, &gi) in gd.iter().enumerate() {
                        let scale = if is_mul { other.data()[omap.at(i)] } else { 1.0 };
                        od[map.at(i)] += gi * scale;
                    }
                    Ok::<_, Error>(Some(out))
                };
                Ok(vec![reduce(0, ba, av, bv, bb)?, reduce(1, bb, bv, av, ba)?])
            }
            OpKind::Relu => unary(&|i| if x.data()[i] > 0.0 { gd[i] } else { 0.0 }),
            OpKind::Tanh => unary(&|i| gd[i] * (1.0 - y.data()[i] * y.data()[i])),
            OpKind::Sigmoid => unary(&|i| gd[i] * y.data()[i] * (1.0 - y.data()[i])),
            OpKind::Log => unary(&|i| gd[i] / x.data()[i]),
            OpKind::Scale(c) => unary(&|i| gd[i] * c),
            OpKind::Sum => unary(&|_| gd[0]),
            OpKind::Mean => {
                let n = x.numel() as f64;
                unary(&|_| gd[0] / n)
            }
            OpKind::Pick(k) => unary(&|i| if i == *k { gd[0] } else { 0.0 }),
            OpKind::StraightThrough => unary(&|i| gd[i]),
            OpKind::SoftmaxLastdim | OpKind::LogSoftmaxLastdim => {
                if !wants(0) {
                    return Ok(vec![None]);
                }
                let cols = y.last_dim();
                let mut out = vec![0.0; y.numel()];
                for (r, orow) in out.chunks_mut(cols).enumerate() {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    if node.op == OpKind::SoftmaxLastdim {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            orow[j] = yr[j] * (gr[j] - dot);
                        }
                    } else {
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            orow[j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(y.shape().to_vec(), out)?)])
            }
            OpKind::ConcatLastdim => {
                let total = y.last_dim();
                let rows = y.numel() / total.max(1);
                let mut offset = 0;
                let mut grads = Vec::with_capacity(node.inputs.len());
                for (k, input) in node.inputs.iter().enumerate() {
                    let part = self.value(*input);
                    let c = part.last_dim();
                    if wants(k) {
                        let mut data = Vec::with_capacity(part.numel());
                        for r in 0..rows {
                            data.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        grads.push(Some(Tensor::new(part.shape().to_vec(), data)?));
                    } else {
                        grads.push(None);
                    }
                    offset += c;
                }
                Ok(grads)
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
