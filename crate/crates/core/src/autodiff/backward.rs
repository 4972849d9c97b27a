//! Reverse-mode differentiation that emits new graph nodes.
//!
//! Every derivative rule is written with the graph's own ops, so a gradient
//! expression can be differentiated again.

use super::graph::{ConvMode, Graph, NodeId, Op};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient expressions returned by [`Graph::grad`], aligned with `wrt`.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub nodes: Vec<NodeId>,
    /// `true` where the requested node does not influence the output; the
    /// matching entry of `nodes` is then a zero constant.
    pub unreachable: Vec<bool>,
}

impl Graph {
    /// Build expressions for d`output`/d`wrt[i]`.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::NotScalar {
                node: output.0,
                shape: self.shape(output).to_vec(),
            });
        }
        let end = output.0 + 1;
        let mut depends = vec![false; end];
        for w in wrt {
            if w.0 < end {
                depends[w.0] = true;
            }
        }
        for i in 0..end {
            if !depends[i] && self.nodes[i].inputs.iter().any(|j| depends[j.0]) {
                depends[i] = true;
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; end];
        if depends[output.0] {
            let seed = Tensor::ones(self.shape(output));
            adjoint[output.0] = Some(self.constant(seed));
        }
        for i in (0..end).rev() {
            let Some(upstream) = adjoint[i] else { continue };
            let inputs = self.nodes[i].inputs.clone();
            for (slot, &input) in inputs.iter().enumerate() {
                if !depends[input.0] {
                    continue;
                }
                let contribution = self.input_adjoint(NodeId(i), slot, upstream)?;
                adjoint[input.0] = Some(match adjoint[input.0] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }

        let mut nodes = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::with_capacity(wrt.len());
        for w in wrt {
            match adjoint.get(w.0).copied().flatten() {
                Some(g) => {
                    nodes.push(g);
                    unreachable.push(false);
                }
                None => {
                    let zero = Tensor::zeros(self.shape(*w));
                    nodes.push(self.constant(zero));
                    unreachable.push(true);
                }
            }
        }
        Ok(Gradients { nodes, unreachable })
    }

    /// Numeric gradient of a scalar with respect to `wrt`.
    ///
    /// Used on distance scalars that were themselves assembled from gradient
    /// expressions, where this is a second-order derivative.
    pub fn grad2(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let g = self.grad(output, wrt)?;
        Ok(g.nodes.iter().map(|&n| self.value(n).clone()).collect())
    }

    /// Contribution of node `id`'s adjoint to its input number `slot`.
    fn input_adjoint(&mut self, id: NodeId, slot: usize, upstream: NodeId) -> Result<NodeId> {
        let op = self.nodes[id.0].op.clone();
        let inputs = self.nodes[id.0].inputs.clone();
        let input_shape = self.shape(inputs[slot]).to_vec();
        match op {
            Op::Leaf(_) | Op::Constant => unreachable!("source nodes have no inputs"),
            Op::Add => Ok(upstream),
            Op::Sub => {
                if slot == 0 {
                    Ok(upstream)
                } else {
                    self.scalar_mul(upstream, -1.0)
                }
            }
            Op::Mul => self.mul(upstream, inputs[1 - slot]),
            Op::ScalarMul(c) => self.scalar_mul(upstream, c),
            Op::MatMul { trans_a, trans_b } => {
                let (a, b) = (inputs[0], inputs[1]);
                match (slot, trans_a) {
                    (0, false) => self.matmul_t(upstream, b, false, !trans_b),
                    (0, true) => self.matmul_t(b, upstream, trans_b, true),
                    (_, _) if !trans_b => self.matmul_t(a, upstream, !trans_a, false),
                    _ => self.matmul_t(upstream, a, true, trans_a),
                }
            }
            Op::Conv2d { mode, pad } => {
                let (l, r) = (inputs[0], inputs[1]);
                match (mode, slot) {
                    (ConvMode::Forward, 0) => self.conv_mode(ConvMode::InputGrad, pad, upstream, r),
                    (ConvMode::Forward, _) => self.conv_mode(ConvMode::KernelGrad, pad, l, upstream),
                    (ConvMode::InputGrad, 0) => self.conv_mode(ConvMode::Forward, pad, upstream, r),
                    (ConvMode::InputGrad, _) => self.conv_mode(ConvMode::KernelGrad, pad, upstream, l),
                    (ConvMode::KernelGrad, 0) => self.conv_mode(ConvMode::InputGrad, pad, r, upstream),
                    (ConvMode::KernelGrad, _) => self.conv_mode(ConvMode::Forward, pad, l, upstream),
                }
            }
            Op::Sigmoid => {
                // s' = s - s^2
                let sq = self.square(id)?;
                let slope = self.sub(id, sq)?;
                self.mul(upstream, slope)
            }
            Op::Log => {
                // 1/x = exp(-log x)
                let neg = self.scalar_mul(id, -1.0)?;
                let recip = self.exp(neg)?;
                self.mul(upstream, recip)
            }
            Op::Exp => self.mul(upstream, id),
            Op::Square => {
                let prod = self.mul(upstream, inputs[0])?;
                self.scalar_mul(prod, 2.0)
            }
            Op::Sum => self.broadcast(upstream, &input_shape),
            Op::Mean => {
                let n = self.value(inputs[0]).numel() as f64;
                let spread = self.broadcast(upstream, &input_shape)?;
                self.scalar_mul(spread, 1.0 / n)
            }
            Op::Reshape => self.reshape(upstream, &input_shape),
            Op::Softmax => {
                // y * (g - rowsum(g * y))
                let mut row_shape = input_shape.clone();
                *row_shape.last_mut().unwrap() = 1;
                let gy = self.mul(upstream, id)?;
                let rows = self.sum_to(gy, &row_shape)?;
                let spread = self.broadcast(rows, &input_shape)?;
                let centered = self.sub(upstream, spread)?;
                self.mul(id, centered)
            }
            Op::Broadcast => self.sum_to(upstream, &input_shape),
        }
    }
}
