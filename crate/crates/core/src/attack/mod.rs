//! Gradient-matching reconstruction of private inputs and labels.
//!
//! The attacker optimizes a dummy batch `(x', y'_logits)` so that the model
//! gradients it induces match the observed ones. The dummy label is
//! `softmax(y'_logits)`, so labels are optimized continuously.

pub mod lbfgs;

use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{match_samples, mse_slices, LayerDistance};
use crate::models::{soft_cross_entropy, GradSet, ModelSpec, ParamSet};

pub use lbfgs::{lbfgs_minimize, Lbfgs, LbfgsConfig, StepOutcome};

const DUMMY_X: &str = "dummy.x";
const DUMMY_Y: &str = "dummy.y";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Lbfgs,
    /// Fixed-step gradient descent.
    Gd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub optimizer: Optimizer,
    /// Outer attack iterations.
    pub iterations: usize,
    pub lr: f64,
    /// L-BFGS curvature pairs kept.
    pub history: usize,
    /// L-BFGS inner iterations per attack iteration.
    pub max_inner: usize,
    pub seed: u64,
    /// The run counts as converged once the gradient distance drops below
    /// this value.
    pub epsilon: f64,
    /// Positive factor applied to both the dummy and the observed gradients.
    pub grad_scale: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Lbfgs,
            iterations: 300,
            lr: 1.0,
            history: 100,
            max_inner: 20,
            seed: 0,
            epsilon: 1e-8,
            grad_scale: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("attack: {m}")));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be > 0", self.lr));
        }
        if self.optimizer == Optimizer::Lbfgs && (self.history == 0 || self.max_inner == 0) {
            return bad("history and max_inner must be >= 1".into());
        }
        if !(self.grad_scale > 0.0 && self.grad_scale.is_finite()) {
            return bad(format!("gradient scale {} must be > 0", self.grad_scale));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            lr: self.lr,
            history: self.history,
            max_iter: self.max_inner,
            ..LbfgsConfig::default()
        }
    }
}

/// The attacker's optimization variables.
#[derive(Clone, Debug, PartialEq)]
pub struct DummyBatch {
    /// `[N, sample_shape..]`
    pub x: Tensor,
    /// `[N, classes]`, pre-softmax.
    pub y_logits: Tensor,
}

impl DummyBatch {
    /// Unit-normal draws, `x` first, from a stream seeded by `seed`.
    pub fn random(spec: &ModelSpec, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = vec![n];
        xs.extend(spec.sample_shape());
        let x = Tensor::from_fn(&xs, |_| StandardNormal.sample(&mut rng));
        let y_logits = Tensor::from_fn(&[n, spec.classes], |_| StandardNormal.sample(&mut rng));
        Self { x, y_logits }
    }

    pub fn batch_size(&self) -> usize {
        self.x.shape()[0]
    }
}

/// Known private data, used only to annotate the trace.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// Clamp recovered values to `[0, 1]` before measuring error (images).
    pub clamp: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub distance: f64,
    pub layers: IndexMap<String, LayerDistance>,
    /// Mean per-sample error after optimal matching.
    pub mse: Option<f64>,
    /// Worst per-sample error after optimal matching.
    pub max_sample_mse: Option<f64>,
    pub labels_correct: Option<bool>,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x: Tensor,
    pub label_logits: Tensor,
    pub labels: Vec<usize>,
    pub final_distance: f64,
    /// Per-parameter distances at the returned iterate.
    pub final_layers: IndexMap<String, LayerDistance>,
    /// Record 0 is the initial state; record `i` follows attack iteration `i`.
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
    /// Line searches that found no acceptable step.
    pub stalls: usize,
    /// Set when the attack stopped on a non-finite value.
    pub failure: Option<String>,
}

impl AttackResult {
    /// First iteration whose matched mean error is below `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.trace
            .iter()
            .find(|r| r.mse.is_some_and(|m| m < threshold))
            .map(|r| r.iteration)
    }
}

/// `sum((dummy_i - observed_i)^2)` over all entries, as a graph node.
pub fn gradient_distance(g: &mut Graph, dummy: &[(String, NodeId)], observed: &GradSet) -> Result<NodeId> {
    if dummy.len() != observed.len() || dummy.is_empty() {
        return Err(Error::KeyMismatch(format!(
            "{} dummy gradients vs {} observed",
            dummy.len(),
            observed.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for ((name, node), (oname, obs)) in dummy.iter().zip(observed.iter()) {
        if name != oname {
            return Err(Error::KeyMismatch(format!("`{name}` vs `{oname}`")));
        }
        if g.shape(*node) != obs.shape() {
            return Err(Error::KeyMismatch(format!(
                "`{name}` has shape {:?} vs {:?}",
                g.shape(*node),
                obs.shape()
            )));
        }
        let o = g.constant(obs.clone());
        let diff = g.sub(*node, o)?;
        let sq = g.square(diff)?;
        let s = g.sum_all(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Argmax of each row; ties go to the lowest index.
pub fn recover_labels(y_logits: &Tensor) -> Vec<usize> {
    let n = y_logits.shape()[0];
    (0..n)
        .map(|i| {
            let row = y_logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// For every trailing-axis vector of `x`, the id of the nearest row of
/// `table` in Euclidean distance; ties go to the lowest id.
pub fn recover_tokens(x: &Tensor, table: &Tensor) -> Result<Vec<usize>> {
    let dim = table.row_width();
    if x.shape().last() != Some(&dim) {
        return Err(Error::shape(
            "recover_tokens",
            format!("embedding {:?} vs table {:?}", x.shape(), table.shape()),
        ));
    }
    let vocab = table.shape()[0];
    Ok(x.data()
        .chunks(dim)
        .map(|v| {
            let mut best = (f64::INFINITY, 0);
            for id in 0..vocab {
                let d: f64 = v.iter().zip(table.row(id)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, id);
                }
            }
            best.1
        })
        .collect())
}

/// A gradient-matching objective compiled once and re-evaluated by rebinding
/// the dummy leaves.
pub struct MatchingProblem {
    graph: Graph,
    distance: NodeId,
    dummy_grads: Vec<(String, NodeId)>,
    d_x: NodeId,
    d_y: NodeId,
    observed: GradSet,
    x_len: usize,
    n: usize,
}

impl MatchingProblem {
    /// Observed gradients are matched on the model's shared parameters;
    /// extra entries (the embedding table) are ignored.
    pub fn new(spec: &ModelSpec, params: &ParamSet, observed: &GradSet, n: usize, grad_scale: f64) -> Result<Self> {
        spec.validate()?;
        if n == 0 {
            return Err(Error::InvalidArgument("attack batch size must be >= 1".into()));
        }
        let names = spec.shared_param_names();
        let observed = observed.select(&names)?;
        params.select(&names)?.check_aligned(&observed)?;

        let mut g = Graph::new();
        let pnodes = spec.param_leaves(&mut g, params, &names)?;
        let mut xs = vec![n];
        xs.extend(spec.sample_shape());
        let x = g.leaf(DUMMY_X, Tensor::zeros(&xs))?;
        let y = g.leaf(DUMMY_Y, Tensor::zeros(&[n, spec.classes]))?;
        let logits = spec.logits(&mut g, &pnodes, x)?;
        let label = g.softmax(y)?;
        let loss = soft_cross_entropy(&mut g, logits, label)?;
        let ids: Vec<NodeId> = pnodes.values().copied().collect();
        let grads = g.grad(loss, &ids)?;
        let mut dummy_grads = Vec::with_capacity(names.len());
        for (name, node) in names.iter().zip(grads.nodes) {
            let node = if grad_scale == 1.0 { node } else { g.scalar_mul(node, grad_scale)? };
            dummy_grads.push((name.clone(), node));
        }
        let observed = observed.scaled(grad_scale);
        let distance = gradient_distance(&mut g, &dummy_grads, &observed)?;
        let dd = g.grad(distance, &[x, y])?;
        Ok(Self {
            graph: g,
            distance,
            dummy_grads,
            d_x: dd.nodes[0],
            d_y: dd.nodes[1],
            observed,
            x_len: xs.iter().product(),
            n,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }

    /// Distance and its gradients with respect to `x'` and `y'_logits`.
    pub fn evaluate(&mut self, x: &[f64], y: &[f64]) -> Result<(f64, &[f64], &[f64])> {
        self.graph.bind(DUMMY_X, x)?;
        self.graph.bind(DUMMY_Y, y)?;
        self.graph.replay()?;
        Ok((
            self.graph.value(self.distance).item(),
            self.graph.value(self.d_x).data(),
            self.graph.value(self.d_y).data(),
        ))
    }

    /// Per-parameter distances at the most recent evaluation.
    pub fn layer_distances(&self) -> IndexMap<String, LayerDistance> {
        self.dummy_grads
            .iter()
            .zip(self.observed.iter())
            .map(|((name, node), (_, obs))| {
                let sum: f64 = self
                    .graph
                    .value(*node)
                    .data()
                    .iter()
                    .zip(obs.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (
                    name.clone(),
                    LayerDistance {
                        mse: sum / obs.numel() as f64,
                        sum,
                    },
                )
            })
            .collect()
    }
}

/// How the dummy batch is split into blocks updated by separate optimizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Schedule {
    /// One block holding the whole batch.
    Joint,
    /// Attack iteration `i` updates only sample `i mod N`.
    Cyclic,
}

/// Reconstruct the batch behind `observed` by jointly optimizing all dummy
/// samples.
pub fn dlg_attack(
    spec: &ModelSpec,
    params: &ParamSet,
    observed: &GradSet,
    n: usize,
    config: &AttackConfig,
    truth: Option<&GroundTruth>,
) -> Result<AttackResult> {
    let init = DummyBatch::random(spec, n, config.seed);
    run_attack(spec, params, observed, init, config, truth, Schedule::Joint)
}

/// Reconstruct the batch behind `observed` by updating one dummy sample per
/// iteration in turn.
pub fn dlg_attack_batched(
    spec: &ModelSpec,
    params: &ParamSet,
    observed: &GradSet,
    n: usize,
    config: &AttackConfig,
    truth: Option<&GroundTruth>,
) -> Result<AttackResult> {
    let init = DummyBatch::random(spec, n, config.seed);
    run_attack(spec, params, observed, init, config, truth, Schedule::Cyclic)
}

/// [`dlg_attack`] from a caller-chosen starting point.
pub fn dlg_attack_from(
    spec: &ModelSpec,
    params: &ParamSet,
    observed: &GradSet,
    init: DummyBatch,
    config: &AttackConfig,
    truth: Option<&GroundTruth>,
) -> Result<AttackResult> {
    run_attack(spec, params, observed, init, config, truth, Schedule::Joint)
}

struct Tracker<'a> {
    truth: Option<&'a GroundTruth>,
    start: Instant,
    sample_shape: Vec<usize>,
}

impl Tracker<'_> {
    fn record(&self, iteration: usize, distance: f64, problem: &MatchingProblem, x: &[f64], y: &[f64], classes: usize) -> Result<TraceRecord> {
        let (mut mse, mut max_sample_mse, mut labels_correct) = (None, None, None);
        if let Some(t) = self.truth {
            let n = problem.n;
            let mut shape = vec![n];
            shape.extend(&self.sample_shape);
            let rec = Tensor::new(shape, x.to_vec())?;
            let labels = recover_labels(&Tensor::new(vec![n, classes], y.to_vec())?);
            if n == 1 {
                mse = Some(mse_slices(rec.data(), t.x.data(), t.clamp));
                max_sample_mse = mse;
                labels_correct = Some(labels == t.labels);
            } else {
                let m = match_samples(&rec, &t.x, t.clamp)?;
                mse = Some(m.mean());
                max_sample_mse = Some(m.max());
                labels_correct = Some(m.perm.iter().enumerate().all(|(i, &j)| labels[i] == t.labels[j]));
            }
        }
        Ok(TraceRecord {
            iteration,
            distance,
            layers: problem.layer_distances(),
            mse,
            max_sample_mse,
            labels_correct,
            elapsed_ms: self.start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

fn run_attack(
    spec: &ModelSpec,
    params: &ParamSet,
    observed: &GradSet,
    init: DummyBatch,
    config: &AttackConfig,
    truth: Option<&GroundTruth>,
    schedule: Schedule,
) -> Result<AttackResult> {
    config.validate()?;
    let n = init.batch_size();
    let mut problem = MatchingProblem::new(spec, params, observed, n, config.grad_scale)?;
    if init.x.numel() != problem.x_len || init.y_logits.shape() != [n, spec.classes] {
        return Err(Error::shape("dummy batch", format!("{:?} / {:?}", init.x.shape(), init.y_logits.shape())));
    }
    if let Some(t) = truth {
        if t.x.shape() != init.x.shape() || t.labels.len() != n {
            return Err(Error::shape("ground truth", format!("{:?} vs {:?}", t.x.shape(), init.x.shape())));
        }
    }
    let tracker = Tracker {
        truth,
        start: Instant::now(),
        sample_shape: spec.sample_shape(),
    };
    let classes = spec.classes;
    let (x_row, y_row) = (problem.x_len / n, classes);
    let blocks = match schedule {
        Schedule::Joint => 1,
        Schedule::Cyclic => n,
    };
    // Block b owns samples `block_samples(b)`.
    let block_samples = |b: usize| -> std::ops::Range<usize> {
        match schedule {
            Schedule::Joint => 0..n,
            Schedule::Cyclic => b..b + 1,
        }
    };

    let mut x = init.x.into_data();
    let mut y = init.y_logits.into_data();
    let mut optimizers: Vec<Lbfgs> = (0..blocks).map(|_| Lbfgs::new(config.lbfgs())).collect();

    let mut result = AttackResult {
        x: Tensor::zeros(&[1]),
        label_logits: Tensor::zeros(&[1]),
        labels: Vec::new(),
        final_distance: f64::INFINITY,
        final_layers: IndexMap::new(),
        trace: Vec::new(),
        converged: false,
        stalls: 0,
        failure: None,
    };
    let initial = problem.evaluate(&x, &y)?.0;
    result.trace.push(tracker.record(0, initial, &problem, &x, &y, classes)?);
    let mut best = (initial, x.clone(), y.clone(), 0);
    let mut current = initial;

    for iteration in 1..=config.iterations {
        if current < config.epsilon {
            break;
        }
        let b = iteration.wrapping_sub(1) % blocks;
        let samples = block_samples(b);
        let (xr, yr) = (samples.start * x_row..samples.end * x_row, samples.start * y_row..samples.end * y_row);
        let mut state: Vec<f64> = x[xr.clone()].iter().chain(&y[yr.clone()]).copied().collect();
        let split = xr.len();

        let step = match config.optimizer {
            Optimizer::Lbfgs => {
                let (xs, ys) = (&mut x, &mut y);
                let problem = &mut problem;
                let mut objective = |s: &[f64]| -> Result<(f64, Vec<f64>)> {
                    xs[xr.clone()].copy_from_slice(&s[..split]);
                    ys[yr.clone()].copy_from_slice(&s[split..]);
                    let (d, gx, gy) = problem.evaluate(xs, ys)?;
                    let grad = gx[xr.clone()].iter().chain(&gy[yr.clone()]).copied().collect();
                    Ok((d, grad))
                };
                optimizers[b].step(&mut state, &mut objective).map(|o| o.stalls)
            }
            Optimizer::Gd => problem.evaluate(&x, &y).map(|(_, gx, gy)| {
                for (s, g) in state.iter_mut().zip(gx[xr.clone()].iter().chain(&gy[yr.clone()])) {
                    *s -= config.lr * g;
                }
                0
            }),
        };
        match step {
            Ok(stalls) => result.stalls += stalls,
            Err(e) => {
                result.failure = Some(e.to_string());
                break;
            }
        }
        x[xr].copy_from_slice(&state[..split]);
        y[yr].copy_from_slice(&state[split..]);
        // Re-evaluate at the accepted point so the graph reflects it.
        current = match problem.evaluate(&x, &y) {
            Ok((d, _, _)) => d,
            Err(e) => {
                result.failure = Some(e.to_string());
                break;
            }
        };
        result.trace.push(tracker.record(iteration, current, &problem, &x, &y, classes)?);
        if current < best.0 {
            best = (current, x.clone(), y.clone(), result.trace.len() - 1);
        }
    }

    let mut xs = vec![n];
    xs.extend(spec.sample_shape());
    result.x = Tensor::new(xs, best.1)?;
    result.label_logits = Tensor::new(vec![n, classes], best.2)?;
    result.labels = recover_labels(&result.label_logits);
    result.final_distance = best.0;
    result.final_layers = result.trace[best.3].layers.clone();
    result.converged = best.0 < config.epsilon;
    Ok(result)
}
