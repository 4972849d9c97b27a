use std::collections::HashMap;
use std::fmt;

use super::kernels;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// Zero padding of a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output keeps the input's spatial size; kernel extents must be odd.
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

/// Which member of the convolution family a conv node computes.
///
/// `InputGrad` and `KernelGrad` are the adjoints of `Forward` with respect to
/// its data and kernel operands; the three are mutually closed under
/// differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    Forward,
    InputGrad,
    KernelGrad,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf(String),
    Constant,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    MatMul { trans_a: bool, trans_b: bool },
    Conv2d { mode: ConvMode, pad: usize },
    Sigmoid,
    Log,
    Exp,
    /// Sum-reduction onto the node's own (broadcast-compatible) shape.
    Sum,
    /// Mean of all elements.
    Mean,
    Reshape,
    /// Softmax over the last axis.
    Softmax,
    Square,
    /// Numpy-style expansion onto the node's shape.
    Broadcast,
}

/// Fieldless view of [`Op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Conv2d,
    Sigmoid,
    Log,
    Exp,
    Sum,
    Mean,
    Reshape,
    Softmax,
    Square,
    Broadcast,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf(_) => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::ScalarMul(_) => OpKind::ScalarMul,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Log => OpKind::Log,
            Op::Exp => OpKind::Exp,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Reshape => OpKind::Reshape,
            Op::Softmax => OpKind::Softmax,
            Op::Square => OpKind::Square,
            Op::Broadcast => OpKind::Broadcast,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind() {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Softmax => "softmax",
            OpKind::Square => "square",
            OpKind::Broadcast => "broadcast",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) value: Tensor,
}

/// Append-only expression graph with eagerly evaluated node values.
///
/// Nodes can only reference earlier nodes, so index order is a topological
/// order. [`Graph::forward`] replays every node after rebinding leaves, which
/// also refreshes any gradient expressions previously built by
/// [`Graph::grad`].
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    generation: u64,
}

fn broadcastable(src: &[usize], dst: &[usize]) -> bool {
    if src.len() > dst.len() {
        return false;
    }
    let offset = dst.len() - src.len();
    src.iter()
        .enumerate()
        .all(|(i, &s)| s == 1 || s == dst[i + offset])
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

    /// Number of completed [`Graph::forward`] replays.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn leaf_id(&self, name: &str) -> Result<NodeId> {
        self.leaves
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLeaf(name.to_string()))
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        let name = name.into();
        if self.leaves.contains_key(&name) {
            return Err(Error::DuplicateLeaf(name));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: self.nodes.len(),
                op: "leaf",
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(name.clone()),
            inputs: Vec::new(),
            value,
        });
        self.leaves.insert(name, id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Constant,
            inputs: Vec::new(),
            value,
        });
        id
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> Result<NodeId> {
        let id = self.nodes.len();
        let mut value = Tensor::zeros(&shape);
        {
            let ins: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            evaluate(&op, &ins, &mut value);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id, op: op.name() });
        }
        self.nodes.push(Node { op, inputs, value });
        Ok(NodeId(id))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        self.push(Op::Add, vec![a, b], shape)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        self.push(Op::Sub, vec![a, b], shape)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        self.push(Op::Mul, vec![a, b], shape)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        self.push(Op::ScalarMul(c), vec![a], shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("rank-2 operands required, got {sa:?} and {sb:?}")));
        }
        let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner extents {ka} vs {kb}")));
        }
        self.push(Op::MatMul { trans_a, trans_b }, vec![a, b], vec![m, n])
    }

    /// Stride-1 convolution of `x` (N x C x H x W) with `kernel` (O x C x kh x kw).
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        let ks = self.shape(kernel);
        if ks.len() != 4 {
            return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {ks:?}")));
        }
        if padding == Padding::Same && (ks[2] % 2 == 0 || ks[3] % 2 == 0) {
            return Err(Error::shape("conv2d", "same padding needs odd kernel extents"));
        }
        if ks[2] != ks[3] {
            return Err(Error::shape("conv2d", "kernel must be square"));
        }
        let pad = padding.amount(ks[2]);
        self.conv_mode(ConvMode::Forward, pad, x, kernel)
    }

    pub(crate) fn conv_mode(&mut self, mode: ConvMode, pad: usize, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (sl, sr) = (self.shape(lhs).to_vec(), self.shape(rhs).to_vec());
        if sl.len() != 4 || sr.len() != 4 {
            return Err(Error::shape("conv2d", format!("rank-4 operands required, got {sl:?} and {sr:?}")));
        }
        let p = 2 * pad;
        let bad = |d: String| Err(Error::shape("conv2d", d));
        let shape = match mode {
            ConvMode::Forward => {
                // x: N C H W, k: O C kh kw
                if sl[1] != sr[1] {
                    return bad(format!("channels {} vs kernel {}", sl[1], sr[1]));
                }
                if sl[2] + p < sr[2] || sl[3] + p < sr[3] {
                    return bad(format!("kernel {sr:?} larger than padded input {sl:?}"));
                }
                vec![sl[0], sr[0], sl[2] + p - sr[2] + 1, sl[3] + p - sr[3] + 1]
            }
            ConvMode::InputGrad => {
                // g: N O Ho Wo, k: O C kh kw
                if sl[1] != sr[0] {
                    return bad(format!("channels {} vs kernel {}", sl[1], sr[0]));
                }
                if sl[2] + sr[2] < 1 + p || sl[3] + sr[3] < 1 + p {
                    return bad("empty input extent".into());
                }
                vec![sl[0], sr[1], sl[2] + sr[2] - 1 - p, sl[3] + sr[3] - 1 - p]
            }
            ConvMode::KernelGrad => {
                // x: N C H W, g: N O Ho Wo
                if sl[0] != sr[0] {
                    return bad(format!("batch {} vs {}", sl[0], sr[0]));
                }
                if sl[2] + 1 + p <= sr[2] || sl[3] + 1 + p <= sr[3] {
                    return bad("empty kernel extent".into());
                }
                vec![sr[1], sl[1], sl[2] + 1 + p - sr[2], sl[3] + 1 + p - sr[3]]
            }
        };
        self.push(Op::Conv2d { mode, pad }, vec![lhs, rhs], shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid, vec![a], shape)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log, vec![a], shape)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp, vec![a], shape)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        self.push(Op::Square, vec![a], shape)
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![a], Vec::new())
    }

    /// Sum-reduce onto `shape`, which must broadcast back to the input shape.
    pub fn sum_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !broadcastable(shape, self.shape(a)) {
            return Err(Error::shape("sum", format!("{shape:?} does not broadcast to {:?}", self.shape(a))));
        }
        self.push(Op::Sum, vec![a], shape.to_vec())
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, vec![a], Vec::new())
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        self.push(Op::Reshape, vec![a], shape.to_vec())
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).is_empty() {
            return Err(Error::shape("softmax", "needs at least one axis"));
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax, vec![a], shape)
    }

    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !broadcastable(self.shape(a), shape) {
            return Err(Error::shape("broadcast", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        self.push(Op::Broadcast, vec![a], shape.to_vec())
    }

    /// Rebind the named leaves and re-evaluate every node; returns the value
    /// of `output`.
    pub fn forward(&mut self, bindings: &[(&str, &Tensor)], output: NodeId) -> Result<Tensor> {
        for (name, value) in bindings {
            self.bind(name, value.data())?;
        }
        self.replay()?;
        Ok(self.value(output).clone())
    }

    /// Overwrite a leaf's elements in place; shapes are fixed at creation.
    pub fn bind(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let id = self.leaf_id(name)?;
        let node = &mut self.nodes[id.0];
        if node.value.numel() != data.len() {
            return Err(Error::shape(
                "bind",
                format!("leaf `{name}` has {} elements, got {}", node.value.numel(), data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node: id.0, op: "leaf" });
        }
        node.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Re-evaluate every non-source node in creation order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if node.inputs.is_empty() {
                continue;
            }
            let ins: Vec<&Tensor> = node.inputs.iter().map(|j| &done[j.0].value).collect();
            evaluate(&node.op, &ins, &mut node.value);
            if !node.value.is_finite() {
                return Err(Error::NonFinite { node: i, op: node.op.name() });
            }
        }
        self.generation += 1;
        Ok(())
    }
}

fn evaluate(op: &Op, ins: &[&Tensor], out: &mut Tensor) {
    let out_shape = out.shape().to_vec();
    let o = out.data_mut();
    let elementwise2 = |o: &mut [f64], f: &dyn Fn(f64, f64) -> f64| {
        for ((d, &a), &b) in o.iter_mut().zip(ins[0].data()).zip(ins[1].data()) {
            *d = f(a, b);
        }
    };
    let elementwise1 = |o: &mut [f64], f: &dyn Fn(f64) -> f64| {
        for (d, &a) in o.iter_mut().zip(ins[0].data()) {
            *d = f(a);
        }
    };
    match op {
        Op::Leaf(_) | Op::Constant => {}
        Op::Add => elementwise2(o, &|a, b| a + b),
        Op::Sub => elementwise2(o, &|a, b| a - b),
        Op::Mul => elementwise2(o, &|a, b| a * b),
        Op::ScalarMul(c) => {
            let c = *c;
            elementwise1(o, &|a| a * c)
        }
        Op::MatMul { trans_a, trans_b } => kernels::matmul(
            ins[0].data(),
            ins[0].shape(),
            ins[1].data(),
            ins[1].shape(),
            *trans_a,
            *trans_b,
            o,
        ),
        Op::Conv2d { mode, pad } => kernels::conv2d(
            *mode,
            *pad,
            ins[0].data(),
            ins[0].shape(),
            ins[1].data(),
            ins[1].shape(),
            o,
            &out_shape,
        ),
        Op::Sigmoid => elementwise1(o, &kernels::sigmoid),
        Op::Log => elementwise1(o, &f64::ln),
        Op::Exp => elementwise1(o, &f64::exp),
        Op::Square => elementwise1(o, &|a| a * a),
        Op::Sum => kernels::sum_to(ins[0].data(), ins[0].shape(), o, &out_shape),
        Op::Mean => {
            let x = ins[0].data();
            o[0] = x.iter().sum::<f64>() / x.len() as f64;
        }
        Op::Reshape => o.copy_from_slice(ins[0].data()),
        Op::Softmax => {
            let width = *ins[0].shape().last().unwrap();
            kernels::softmax(ins[0].data(), width, o)
        }
        Op::Broadcast => kernels::broadcast(ins[0].data(), ins[0].shape(), o, &out_shape),
    }
}
