//! Finite-difference verification of the differentiation rules, plus a
//! generator of random expression graphs to run it on.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Graph, NodeId, Padding};
use super::tensor::Tensor;
use crate::error::Result;

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Largest elementwise deviation, relative to the larger of the two vectors'
/// max-norms.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Compare `grad(output, leaves)` against central differences obtained by
/// replaying the graph. Returns the worst relative error over all leaves.
pub fn check_gradients(graph: &mut Graph, output: NodeId, leaves: &[String], h: f64) -> Result<f64> {
    let ids = leaves
        .iter()
        .map(|n| graph.leaf_id(n))
        .collect::<Result<Vec<_>>>()?;
    let base: Vec<Tensor> = ids.iter().map(|&i| graph.value(i).clone()).collect();
    let analytic = graph.grad2(output, &ids)?;

    let mut worst = 0.0f64;
    for (k, name) in leaves.iter().enumerate() {
        let numeric = central_difference(
            |x| {
                graph.bind(name, x)?;
                graph.replay()?;
                Ok(graph.value(output).item())
            },
            base[k].data(),
            h,
        )?;
        graph.bind(name, base[k].data())?;
        worst = worst.max(max_relative_error(analytic[k].data(), &numeric));
    }
    graph.replay()?;
    Ok(worst)
}

/// A randomly composed scalar expression over a few named leaves.
pub struct RandomGraph {
    pub graph: Graph,
    pub output: NodeId,
    pub leaves: Vec<String>,
}

const BOUND: f64 = 4.0;

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Build a random graph of at most `max_nodes` nodes touching every op kind
/// over time. Intermediate values are kept bounded so finite differences
/// stay well conditioned.
pub fn random_graph<R: Rng>(rng: &mut R, max_nodes: usize) -> Result<RandomGraph> {
    let mut g = Graph::new();
    let mut leaves = Vec::new();
    let mut pool: Vec<NodeId> = Vec::new();

    let n_leaves = rng.gen_range(1..=3);
    for i in 0..n_leaves {
        let shape = [rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let name = format!("x{i}");
        let id = g.leaf(&name, normal_tensor(rng, &shape, 1.0))?;
        leaves.push(name);
        pool.push(id);
    }

    let mut weights = 0;
    // Leave room for the final fold (three nodes per term) and the largest
    // single step (four nodes plus one leaf).
    while g.len() + 3 * (leaves.len() + 6) + 4 < max_nodes.max(40) {
        let a = *pool.choose(rng).unwrap();
        let shape = g.shape(a).to_vec();
        let choice = rng.gen_range(0..14);
        let made = match choice {
            0 => Some(g.sigmoid(a)?),
            1 => {
                let s = g.sigmoid(a)?;
                Some(g.exp(s)?)
            }
            2 => {
                let s = g.sigmoid(a)?;
                Some(g.log(s)?)
            }
            3 => Some(g.square(a)?),
            4 => Some(g.scalar_mul(a, rng.gen_range(-1.5..1.5))?),
            5 => Some(g.softmax(a)?),
            6 | 7 => {
                let same: Vec<NodeId> = pool.iter().copied().filter(|&b| g.shape(b) == shape.as_slice()).collect();
                let b = *same.choose(rng).unwrap();
                Some(match choice {
                    6 => {
                        if rng.gen_bool(0.5) {
                            g.add(a, b)?
                        } else {
                            g.sub(a, b)?
                        }
                    }
                    _ => g.mul(a, b)?,
                })
            }
            8 if shape.len() == 2 => {
                // Dense-style product with a fresh weight leaf.
                let out = rng.gen_range(1..=4);
                let name = format!("w{weights}");
                weights += 1;
                let trans_b = rng.gen_bool(0.5);
                let wshape = if trans_b { [out, shape[1]] } else { [shape[1], out] };
                let w = g.leaf(&name, normal_tensor(rng, &wshape, 0.5))?;
                leaves.push(name);
                Some(g.matmul_t(a, w, false, trans_b)?)
            }
            9 if shape.len() == 2 => {
                // Transposed-lhs product against an existing node.
                let rows: Vec<NodeId> = pool
                    .iter()
                    .copied()
                    .filter(|&b| g.shape(b).len() == 2 && g.shape(b)[0] == shape[0])
                    .collect();
                let b = *rows.choose(rng).unwrap();
                Some(g.matmul_t(a, b, true, false)?)
            }
            10 if shape.len() == 2 => {
                let row = g.sum_to(a, &[1, shape[1]])?;
                Some(g.broadcast(row, &shape)?)
            }
            11 if shape.len() == 2 => {
                let flat = g.reshape(a, &[shape[0] * shape[1]])?;
                Some(g.broadcast(flat, &[2, shape[0] * shape[1]])?)
            }
            12 if shape.len() == 2 && shape[0] >= 2 && shape[1] >= 2 => {
                let img = g.reshape(a, &[1, 1, shape[0], shape[1]])?;
                let k = if rng.gen_bool(0.5) { 1 } else { 2 };
                let (ks, pad) = if k == 2 { (2, Padding::Valid) } else { (3, Padding::Same) };
                let name = format!("w{weights}");
                weights += 1;
                let cout = rng.gen_range(1..=2);
                let kern = g.leaf(&name, normal_tensor(rng, &[cout, 1, ks, ks], 0.5))?;
                leaves.push(name);
                let y = g.conv2d(img, kern, pad)?;
                let ys = g.shape(y).to_vec();
                Some(g.reshape(y, &[ys[1] * ys[2], ys[3]])?)
            }
            13 => {
                let m = g.mean(a)?;
                let s = g.broadcast(m, &shape)?;
                Some(g.mul(s, a)?)
            }
            _ => None,
        };
        if let Some(id) = made {
            if g.value(id).max_abs() <= BOUND {
                pool.push(id);
            }
        }
    }

    // Fold a handful of pool members (and every leaf) into one scalar.
    let mut terms: Vec<NodeId> = pool.iter().rev().take(4).copied().collect();
    for name in &leaves {
        let id = g.leaf_id(name)?;
        if !terms.contains(&id) {
            terms.push(id);
        }
    }
    let mut acc: Option<NodeId> = None;
    for t in terms {
        let squashed = g.sigmoid(t)?;
        let s = g.sum_all(squashed)?;
        acc = Some(match acc {
            None => s,
            Some(p) => g.add(p, s)?,
        });
    }
    let output = acc.unwrap();
    Ok(RandomGraph {
        graph: g,
        output,
        leaves,
    })
}
