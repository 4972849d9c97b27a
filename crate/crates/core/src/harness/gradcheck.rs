//! The autodiff verification suite behind `gradleak gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{DummyBatch, MatchingProblem};
use crate::autodiff::check::{central_difference, check_gradients, max_relative_error, random_graph};
use crate::autodiff::{Padding, Tensor};
use crate::error::Result;
use crate::models::{init_params, one_hot, true_gradients, ConvLayer, ModelSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub graphs: usize,
    /// Worst relative error of first-order gradients over the random graphs.
    pub first_order: f64,
    /// Worst relative error of the distance gradient, per model.
    pub second_order: Vec<(String, f64)>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.second_order.iter().map(|(_, e)| *e).fold(self.first_order, f64::max)
    }
}

/// Models with one to three weight layers on which the gradient-distance
/// gradient is checked.
pub fn second_order_models() -> Vec<(String, ModelSpec)> {
    let conv = ConvLayer {
        channels: 2,
        kernel: 3,
        padding: Padding::Same,
    };
    vec![
        ("mlp 1 layer".into(), ModelSpec::mlp(64, &[], 4)),
        ("mlp 2 layers".into(), ModelSpec::mlp(64, &[8], 4)),
        ("mlp 3 layers".into(), ModelSpec::mlp(64, &[8, 6], 4)),
        ("conv + dense".into(), ModelSpec::convnet([1, 6, 6], vec![conv], &[], 4)),
    ]
}

/// Central differences (step `h`) against analytic gradients on `graphs`
/// random expression graphs, then on the distance objective of
/// [`second_order_models`].
pub fn gradcheck_suite(graphs: usize, seed: u64, h: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first_order = 0.0f64;
    for _ in 0..graphs {
        let mut rg = random_graph(&mut rng, 120)?;
        first_order = first_order.max(check_gradients(&mut rg.graph, rg.output, &rg.leaves, h)?);
    }
    let mut second_order = Vec::new();
    for (k, (name, spec)) in second_order_models().into_iter().enumerate() {
        let params = init_params(&spec, seed.wrapping_add(k as u64))?;
        let mut shape = vec![1];
        shape.extend(spec.sample_shape());
        let x = Tensor::from_fn(&shape, |_| rng.gen_range(0.0..1.0));
        let label = rng.gen_range(0..spec.classes);
        let observed = true_gradients(&spec, &params, &x, &one_hot(&[label], spec.classes)?)?;
        let dummy = DummyBatch::random(&spec, 1, seed.wrapping_add(100 + k as u64));
        let mut p = MatchingProblem::new(&spec, &params, &observed, 1, 1.0)?;
        let split = dummy.x.numel();
        let joint: Vec<f64> = dummy.x.data().iter().chain(dummy.y_logits.data()).copied().collect();
        let (_, gx, gy) = p.evaluate(&joint[..split], &joint[split..])?;
        let analytic: Vec<f64> = gx.iter().chain(gy).copied().collect();
        let numeric = central_difference(|v| Ok(p.evaluate(&v[..split], &v[split..])?.0), &joint, h)?;
        second_order.push((name, max_relative_error(&analytic, &numeric)));
    }
    Ok(GradcheckReport {
        graphs,
        first_order,
        second_order,
    })
}
