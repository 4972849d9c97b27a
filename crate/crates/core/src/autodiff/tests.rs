use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::check::{check_gradients, random_graph};
use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut g = Graph::new();
    let x = g.leaf("x", Tensor::scalar(0.0)).unwrap();
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).item(), 0.5);
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let a = g
        .leaf("a", t(&[3, 3], &[1.0, -2.0, 3.5, 0.25, 9.0, -1.0, 7.0, 0.0, 2.0]))
        .unwrap();
    let p = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(p), g.value(a));
}

#[test]
fn matmul_transposes() {
    // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
    let mut g = Graph::new();
    let a = g.leaf("a", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let b = g.leaf("b", t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
    let nn = g.matmul_t(a, b, false, false).unwrap();
    let nt = g.matmul_t(a, b, false, true).unwrap();
    let tn = g.matmul_t(a, b, true, false).unwrap();
    let tt = g.matmul_t(a, b, true, true).unwrap();
    assert_eq!(g.value(nn).data(), &[19.0, 22.0, 43.0, 50.0]);
    assert_eq!(g.value(nt).data(), &[17.0, 23.0, 39.0, 53.0]);
    assert_eq!(g.value(tn).data(), &[26.0, 30.0, 38.0, 44.0]);
    assert_eq!(g.value(tt).data(), &[23.0, 31.0, 34.0, 46.0]);
}

/// Plain sliding-window correlation used as the oracle.
fn sliding_window(x: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..=h - kh {
        for j in 0..=w - kw {
            let mut acc = 0.0;
            for a in 0..kh {
                for b in 0..kw {
                    acc += x[(i + a) * w + j + b] * k[a * kw + b];
                }
            }
            out.push(acc);
        }
    }
    out
}

#[test]
fn conv_window_sums_match_sliding_window() {
    let x: Vec<f64> = (0..16).map(|v| v as f64 * 0.5 - 3.0).collect();
    let ones = vec![1.0; 9];
    let mut g = Graph::new();
    let xi = g.leaf("x", t(&[1, 1, 4, 4], &x)).unwrap();
    let k = g.constant(t(&[1, 1, 3, 3], &ones));
    let y = g.conv2d(xi, k, Padding::Valid).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), sliding_window(&x, 4, 4, &ones, 3, 3).as_slice());
}

#[test]
fn same_padding_keeps_extent() {
    let mut g = Graph::new();
    let x = g.leaf("x", Tensor::ones(&[2, 3, 5, 5])).unwrap();
    let k = g.leaf("k", Tensor::ones(&[4, 3, 3, 3])).unwrap();
    let y = g.conv2d(x, k, Padding::Same).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 5, 5]);
    // corner sees a 2x2 window over 3 channels; centre sees 3x3x3
    assert_eq!(g.value(y).data()[0], 12.0);
    assert_eq!(g.value(y).data()[12], 27.0);
}

#[test]
fn derivative_of_square() {
    let mut g = Graph::new();
    let x = g.leaf("x", Tensor::scalar(3.0)).unwrap();
    let y = g.square(x).unwrap();
    let d = g.grad2(y, &[x]).unwrap();
    assert_eq!(d[0].item(), 6.0);
}

#[test]
fn derivative_of_sigmoid_sum_at_zero() {
    let mut g = Graph::new();
    let x = g.leaf("x", Tensor::zeros(&[2, 3])).unwrap();
    let s = g.sigmoid(x).unwrap();
    let total = g.sum_all(s).unwrap();
    let d = g.grad2(total, &[x]).unwrap();
    assert!(d[0].data().iter().all(|&v| v == 0.25));
}

#[test]
fn second_derivative_of_cube() {
    // f = x^3 written as x * x^2; f'' = 6x
    let mut g = Graph::new();
    let x = g.leaf("x", Tensor::scalar(1.5)).unwrap();
    let sq = g.square(x).unwrap();
    let cube = g.mul(x, sq).unwrap();
    let first = g.grad(cube, &[x]).unwrap().nodes[0];
    assert!((g.value(first).item() - 6.75).abs() < 1e-12);
    let second = g.grad2(first, &[x]).unwrap();
    assert!((second[0].item() - 9.0).abs() < 1e-12);
}

#[test]
fn unreachable_leaf_gets_flagged_zero() {
    let mut g = Graph::new();
    let x = g.leaf("x", Tensor::scalar(2.0)).unwrap();
    let z = g.leaf("z", Tensor::ones(&[2, 2])).unwrap();
    let y = g.exp(x).unwrap();
    let grads = g.grad(y, &[x, z]).unwrap();
    assert_eq!(grads.unreachable, vec![false, true]);
    assert_eq!(g.value(grads.nodes[1]), &Tensor::zeros(&[2, 2]));
}

#[test]
fn grad_requires_scalar_output() {
    let mut g = Graph::new();
    let x = g.leaf("x", Tensor::ones(&[2])).unwrap();
    assert!(matches!(g.grad(x, &[x]), Err(Error::NotScalar { .. })));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut g = Graph::new();
    let a = g.leaf("a", Tensor::ones(&[2, 3])).unwrap();
    let b = g.leaf("b", Tensor::ones(&[3, 2])).unwrap();
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { op: "add", .. })));
    assert!(matches!(g.matmul(a, a), Err(Error::ShapeMismatch { op: "matmul", .. })));
    assert!(g.matmul(a, b).is_ok());
}

#[test]
fn non_finite_values_name_the_node() {
    let mut g = Graph::new();
    let x = g.leaf("x", Tensor::scalar(-1.0)).unwrap();
    let err = g.log(x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { node: 1, op: "log" }));

    let mut g = Graph::new();
    let x = g.leaf("x", Tensor::scalar(1.0)).unwrap();
    let y = g.log(x).unwrap();
    let err = g.forward(&[("x", &Tensor::scalar(-2.0))], y).unwrap_err();
    assert!(matches!(err, Error::NonFinite { node: 1, .. }));
}

#[test]
fn forward_replays_gradient_expressions() {
    let mut g = Graph::new();
    let x = g.leaf("x", Tensor::scalar(1.0)).unwrap();
    let y = g.square(x).unwrap();
    let dy = g.grad(y, &[x]).unwrap().nodes[0];
    let v = g.forward(&[("x", &Tensor::scalar(4.0))], dy).unwrap();
    assert_eq!(v.item(), 8.0);
    assert_eq!(g.generation(), 1);
}

#[test]
fn softmax_rows_sum_to_one_and_survive_large_logits() {
    let mut g = Graph::new();
    let x = g.leaf("x", t(&[2, 3], &[1000.0, 1001.0, 999.0, 0.0, 0.0, 0.0])).unwrap();
    let p = g.softmax(x).unwrap();
    let v = g.value(p);
    for r in 0..2 {
        let s: f64 = v.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }
    assert!((v.data()[3] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn broadcast_and_sum_are_adjoint() {
    let mut g = Graph::new();
    let b = g.leaf("b", t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let wide = g.broadcast(b, &[2, 3]).unwrap();
    assert_eq!(g.value(wide).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    let col = g.sum_to(wide, &[2, 1]).unwrap();
    assert_eq!(g.value(col).data(), &[6.0, 6.0]);
    let back = g.sum_to(wide, &[3]).unwrap();
    assert_eq!(g.value(back).data(), &[2.0, 4.0, 6.0]);
    assert!(g.broadcast(b, &[3, 2]).is_err());
}

/// Every node reachable from a gradient expression uses a registered op.
#[test]
fn derivative_rules_are_closed() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut seen = BTreeSet::new();
    for _ in 0..40 {
        let mut rg = random_graph(&mut rng, 120).unwrap();
        let before = rg.graph.len();
        let ids: Vec<_> = rg.leaves.iter().map(|n| rg.graph.leaf_id(n).unwrap()).collect();
        let grads = rg.graph.grad(rg.output, &ids).unwrap();
        // differentiate once more through a scalar of the gradients
        let mut acc = None;
        for &gn in &grads.nodes {
            let sq = rg.graph.square(gn).unwrap();
            let s = rg.graph.sum_all(sq).unwrap();
            acc = Some(match acc {
                None => s,
                Some(p) => rg.graph.add(p, s).unwrap(),
            });
        }
        rg.graph.grad(acc.unwrap(), &ids).unwrap();
        for id in rg.graph.node_ids().skip(before) {
            let kind = rg.graph.op(id).kind();
            assert_ne!(kind, OpKind::Leaf, "gradient pass created a leaf");
            seen.insert(kind);
        }
    }
    // The rules exercised above cover the whole op family.
    for k in [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Exp,
        OpKind::Sum,
        OpKind::Reshape,
        OpKind::Square,
        OpKind::Broadcast,
    ] {
        assert!(seen.contains(&k), "{k:?} never produced");
    }
}

#[test]
fn random_graphs_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let mut rg = random_graph(&mut rng, 200).unwrap();
        assert!(rg.graph.len() <= 200);
        let err = check_gradients(&mut rg.graph, rg.output, &rg.leaves, 1e-5).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }
}

#[test]
fn conv_family_second_order_matches_finite_differences() {
    // D = sum((dL/dk)^2) where L uses conv; differentiate D w.r.t. the input.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    use rand::Rng;
    let mut g = Graph::new();
    let x = g
        .leaf("x", Tensor::from_fn(&[1, 2, 5, 5], |_| rng.gen_range(-1.0..1.0)))
        .unwrap();
    let k = g
        .leaf("k", Tensor::from_fn(&[3, 2, 3, 3], |_| rng.gen_range(-1.0..1.0)))
        .unwrap();
    let y = g.conv2d(x, k, Padding::Same).unwrap();
    let s = g.sigmoid(y).unwrap();
    let loss = g.sum_all(s).unwrap();
    let gk = g.grad(loss, &[k]).unwrap().nodes[0];
    let sq = g.square(gk).unwrap();
    let d = g.sum_all(sq).unwrap();
    let err = check_gradients(&mut g, d, &["x".into(), "k".into()], 1e-5).unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rg = random_graph(&mut rng, 150).unwrap();
    let ids: Vec<_> = rg.leaves.iter().map(|n| rg.graph.leaf_id(n).unwrap()).collect();
    let grads = rg.graph.grad(rg.output, &ids).unwrap();
    let snapshot: Vec<Tensor> = rg.graph.node_ids().map(|i| rg.graph.value(i).clone()).collect();
    rg.graph.replay().unwrap();
    for (i, v) in rg.graph.node_ids().zip(&snapshot) {
        assert_eq!(rg.graph.value(i).data(), v.data());
    }
    assert!(!grads.nodes.is_empty());
}
