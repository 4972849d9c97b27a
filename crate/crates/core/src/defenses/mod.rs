//! Gradient transformations an honest worker can apply before sharing:
//! additive noise, low-precision round trips, magnitude pruning, and
//! several local SGD steps summarized as one effective gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{sgd_step, true_gradients, GradSet, ModelSpec, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    Gaussian,
    Laplacian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// 1 sign, 5 exponent, 10 mantissa bits.
    Fp16,
    /// 1 sign, 8 exponent, 7 mantissa bits.
    Bf16,
    /// Symmetric per-tensor linear quantization to [-127, 127].
    Int8,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Defense {
    None,
    Noise { kind: Noise, variance: f64 },
    Quantize(Precision),
    Prune { sparsity: f64, per_layer: bool },
    /// `steps` local SGD steps at rate `lr`; only the effective gradient is
    /// shared.
    Accumulate { steps: usize, lr: f64 },
}

impl Defense {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("defense: {m}")));
        match *self {
            Defense::Noise { variance, .. } if !(variance > 0.0 && variance.is_finite()) => {
                bad(format!("variance {variance} must be > 0"))
            }
            Defense::Prune { sparsity, .. } if !(0.0..1.0).contains(&sparsity) => {
                bad(format!("sparsity {sparsity} must be in [0, 1)"))
            }
            Defense::Accumulate { steps, lr } if steps == 0 || !(lr > 0.0 && lr.is_finite()) => {
                bad(format!("accumulation needs steps >= 1 and lr > 0, got {steps} and {lr}"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Noise { kind: Noise::Gaussian, .. } => "gaussian",
            Defense::Noise { kind: Noise::Laplacian, .. } => "laplacian",
            Defense::Quantize(Precision::Fp16) => "fp16",
            Defense::Quantize(Precision::Bf16) => "bf16",
            Defense::Quantize(Precision::Int8) => "int8",
            Defense::Prune { .. } => "prune",
            Defense::Accumulate { .. } => "accumulate",
        }
    }

    /// Transform already computed gradients. Accumulation needs the model
    /// and data and is handled by [`accumulate_local`]; here it is the
    /// identity.
    pub fn apply(&self, grads: &GradSet, seed: u64) -> Result<Defended> {
        self.validate()?;
        let (grads, overflow) = match *self {
            Defense::None | Defense::Accumulate { .. } => (grads.clone(), 0),
            Defense::Noise { kind, variance } => (add_noise(grads, kind, variance, seed)?, 0),
            Defense::Quantize(p) => quantize(grads, p),
            Defense::Prune { sparsity, per_layer } => {
                let out = if per_layer {
                    prune_small_per_layer(grads, sparsity)?
                } else {
                    prune_small(grads, sparsity)?
                };
                (out, 0)
            }
        };
        Ok(Defended { grads, overflow })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Defended {
    pub grads: GradSet,
    /// Elements saturated to the largest finite value of the target format.
    pub overflow: usize,
}

/// I.i.d. zero-mean noise of variance `variance` added to every element:
/// Gaussian with std `sqrt(v)`, Laplacian with scale `sqrt(v / 2)`.
pub fn add_noise(grads: &GradSet, kind: Noise, variance: f64, seed: u64) -> Result<GradSet> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise variance {variance} must be > 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = match kind {
        Noise::Gaussian => variance.sqrt(),
        Noise::Laplacian => (variance / 2.0).sqrt(),
    };
    Ok(grads.map(|_, t| {
        t.map(|v| {
            let e: f64 = match kind {
                Noise::Gaussian => StandardNormal.sample(&mut rng),
                Noise::Laplacian => {
                    let m: f64 = Exp1.sample(&mut rng);
                    if rng.gen::<bool>() {
                        -m
                    } else {
                        m
                    }
                }
            };
            v + scale * e
        })
    }))
}

/// Round `x` to the nearest value of a binary float format with
/// `exponent_bits` and `mantissa_bits`, ties to even. Values beyond the
/// largest finite number saturate; the flag reports it.
pub fn round_to_format(x: f64, exponent_bits: u32, mantissa_bits: u32) -> (f64, bool) {
    if x == 0.0 || !x.is_finite() {
        return (x, false);
    }
    let bias = (1i32 << (exponent_bits - 1)) - 1;
    let emin = 1 - bias;
    let m = mantissa_bits as i32;
    let max_finite = (2.0 - 2f64.powi(-m)) * 2f64.powi(bias);
    let a = x.abs();
    let biased = ((a.to_bits() >> 52) & 0x7ff) as i32;
    // f64 subnormals are far below every target format's subnormal range.
    let e = if biased == 0 { emin } else { (biased - 1023).max(emin) };
    let ulp = 2f64.powi(e - m);
    let q = (a / ulp).round_ties_even() * ulp;
    let (q, overflow) = if q > max_finite { (max_finite, true) } else { (q, false) };
    (q.copysign(x), overflow)
}

/// Round-trip every element through `precision`. Returns the count of
/// saturated elements.
pub fn quantize(grads: &GradSet, precision: Precision) -> (GradSet, usize) {
    let mut overflow = 0;
    let out = grads.map(|_, t| match precision {
        Precision::Fp16 | Precision::Bf16 => {
            let (e, m) = if precision == Precision::Fp16 { (5, 10) } else { (8, 7) };
            t.map(|v| {
                let (q, o) = round_to_format(v, e, m);
                overflow += o as usize;
                q
            })
        }
        Precision::Int8 => quantize_int8(t, t.max_abs()),
    });
    (out, overflow)
}

/// Symmetric linear int8 round trip with scale `max_abs / 127`.
pub fn quantize_int8(t: &Tensor, max_abs: f64) -> Tensor {
    if max_abs == 0.0 {
        return t.clone();
    }
    t.map(|v| {
        let q = (v * 127.0 / max_abs).round_ties_even().clamp(-127.0, 127.0);
        q * max_abs / 127.0
    })
}

fn prune_entries(grads: &GradSet, per_layer: bool, sparsity: f64) -> Result<GradSet> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!("sparsity {sparsity} must be in [0, 1)")));
    }
    let mut out = grads.clone();
    let groups: Vec<Vec<usize>> = if per_layer {
        (0..grads.len()).map(|i| vec![i]).collect()
    } else {
        vec![(0..grads.len()).collect()]
    };
    let tensors: Vec<&Tensor> = grads.iter().map(|(_, t)| t).collect();
    let names: Vec<String> = grads.names().map(str::to_string).collect();
    for group in groups {
        let mut order: Vec<(f64, usize, usize)> = group
            .iter()
            .flat_map(|&p| tensors[p].data().iter().enumerate().map(move |(i, v)| (v.abs(), p, i)))
            .collect();
        let count = (sparsity * order.len() as f64).floor() as usize;
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, p, i) in &order[..count] {
            out.get_mut(&names[p]).expect("same keys").data_mut()[i] = 0.0;
        }
    }
    Ok(out)
}

/// Zero the `floor(s * total)` smallest-magnitude elements across all
/// tensors; ties go by tensor order, then element index.
pub fn prune_small(grads: &GradSet, sparsity: f64) -> Result<GradSet> {
    prune_entries(grads, false, sparsity)
}

/// [`prune_small`] applied to each tensor on its own.
pub fn prune_small_per_layer(grads: &GradSet, sparsity: f64) -> Result<GradSet> {
    prune_entries(grads, true, sparsity)
}

/// A worker's local data: batches `(x, y)` visited in order, cyclically.
pub type Shard = [(Tensor, Tensor)];

/// Run `steps` SGD steps at rate `lr` over `shard` starting from `params`.
///
/// Returns the effective gradient `(W_before - W_after) / (steps * lr)` and
/// the final weights. The effective gradient is formed as the mean of the
/// per-step gradients, which is the same quantity without the cancellation
/// error of subtracting weights.
pub fn accumulate_local(
    spec: &ModelSpec,
    params: &ParamSet,
    shard: &Shard,
    steps: usize,
    lr: f64,
) -> Result<(GradSet, ParamSet)> {
    Defense::Accumulate { steps, lr }.validate()?;
    if shard.is_empty() {
        return Err(Error::InvalidArgument("empty shard".into()));
    }
    let mut w = params.clone();
    let mut total: Option<GradSet> = None;
    for step in 0..steps {
        let (x, y) = &shard[step % shard.len()];
        let g = true_gradients(spec, &w, x, y)?;
        w = sgd_step(&w, &g, lr)?;
        total = Some(match total {
            None => g,
            Some(t) => t.zip_with(&g, |a, b| a + b)?,
        });
    }
    let total = total.expect("steps >= 1");
    let effective = if steps == 1 { total } else { total.scaled(1.0 / steps as f64) };
    Ok((effective, w))
}
