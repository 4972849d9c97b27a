//! Reconstruction quality, per-layer gradient distances, token match rate and
//! the leaked/defended judgment.

use std::fmt;

use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::GradSet;

/// Image MSE below which a reconstruction counts as leaked.
pub const DEFAULT_DEFENDABILITY_THRESHOLD: f64 = 0.05;

/// Mean squared error over all pixels, with `recovered` clamped to `[0, 1]`.
pub fn image_mse(recovered: &Tensor, truth: &Tensor) -> Result<f64> {
    if recovered.shape() != truth.shape() {
        return Err(Error::shape(
            "image_mse",
            format!("{:?} vs {:?}", recovered.shape(), truth.shape()),
        ));
    }
    Ok(mse_slices(recovered.data(), truth.data(), true))
}

/// Plain mean squared error between two equally sized slices.
pub fn mse_slices(recovered: &[f64], truth: &[f64], clamp: bool) -> f64 {
    let total: f64 = recovered
        .iter()
        .zip(truth)
        .map(|(&r, &t)| {
            let r = if clamp { r.clamp(0.0, 1.0) } else { r };
            (r - t) * (r - t)
        })
        .sum();
    total / truth.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerDistance {
    /// Mean squared difference over the tensor's elements.
    pub mse: f64,
    /// Summed squared difference; these add up to the gradient distance.
    pub sum: f64,
}

/// Per-parameter-tensor distance between dummy and observed gradients.
pub fn per_layer_distance(dummy: &GradSet, observed: &GradSet) -> Result<IndexMap<String, LayerDistance>> {
    dummy.check_aligned(observed)?;
    Ok(dummy
        .iter()
        .zip(observed.iter())
        .map(|((name, a), (_, b))| {
            let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            (
                name.to_string(),
                LayerDistance {
                    mse: sum / a.numel() as f64,
                    sum,
                },
            )
        })
        .collect())
}

/// Fraction of positions where the two sequences agree.
pub fn match_tokens(recovered: &[usize], truth: &[usize]) -> Result<f64> {
    if recovered.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "token sequences of length {} and {}",
            recovered.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(1.0);
    }
    let hits = recovered.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Leaked,
    Defended,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Leaked => "leaked",
            Verdict::Defended => "defended",
        })
    }
}

/// `Leaked` when `mse < threshold`, `Defended` otherwise (the threshold
/// itself counts as defended).
pub fn judge_defendability(mse: f64, threshold: f64) -> Verdict {
    if mse < threshold {
        Verdict::Leaked
    } else {
        Verdict::Defended
    }
}

/// Assignment of recovered samples to ground-truth samples minimizing the
/// total per-sample error. `perm[i]` is the truth index matched to recovered
/// sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub perm: Vec<usize>,
    /// Error of each recovered sample against its matched truth.
    pub per_sample: Vec<f64>,
}

impl Matching {
    pub fn mean(&self) -> f64 {
        self.per_sample.iter().sum::<f64>() / self.per_sample.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.per_sample.iter().cloned().fold(0.0, f64::max)
    }
}

/// Exhaustive search over permutations for batches of up to 8 samples;
/// larger batches fall back to greedy matching on the cost matrix.
pub fn match_samples(recovered: &Tensor, truth: &Tensor, clamp: bool) -> Result<Matching> {
    if recovered.shape() != truth.shape() || truth.rank() == 0 {
        return Err(Error::shape(
            "match_samples",
            format!("{:?} vs {:?}", recovered.shape(), truth.shape()),
        ));
    }
    let n = truth.shape()[0];
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| mse_slices(recovered.row(i), truth.row(j), clamp)).collect())
        .collect();
    let perm = if n <= 8 {
        best_permutation(&cost)
    } else {
        greedy_assignment(&cost)
    };
    let per_sample = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).collect();
    Ok(Matching { perm, per_sample })
}

fn best_permutation(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut best = (f64::INFINITY, (0..n).collect::<Vec<_>>());
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn search(
        cost: &[Vec<f64>],
        current: &mut Vec<usize>,
        used: &mut [bool],
        partial: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if partial >= best.0 {
            return;
        }
        let i = current.len();
        if i == cost.len() {
            *best = (partial, current.clone());
            return;
        }
        for j in 0..cost.len() {
            if !used[j] {
                used[j] = true;
                current.push(j);
                search(cost, current, used, partial + cost[i][j], best);
                current.pop();
                used[j] = false;
            }
        }
    }
    search(cost, &mut current, &mut used, 0.0, &mut best);
    best.1
}

fn greedy_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut pairs: Vec<(f64, usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (cost[i][j], i, j))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut perm = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    for (_, i, j) in pairs {
        if perm[i] == usize::MAX && !taken[j] {
            perm[i] = j;
            taken[j] = true;
        }
    }
    perm
}

/// Everything measured about one attack.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_sample_mse: Vec<f64>,
    pub mse: f64,
    pub layer_distance: IndexMap<String, LayerDistance>,
    pub token_match_rate: Option<f64>,
    pub verdict: Verdict,
    pub permutation: Vec<usize>,
    pub label_accuracy: f64,
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_set(rng: &mut ChaCha8Rng) -> GradSet {
        [
            ("a".to_string(), Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0))),
            ("b".to_string(), Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0))),
        ]
        .into_iter()
        .collect()
    }

    #[test]
    fn mse_examples() {
        let zeros = Tensor::zeros(&[1, 4, 4]);
        let ones = Tensor::ones(&[1, 4, 4]);
        assert_eq!(image_mse(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(image_mse(&zeros, &ones).unwrap(), 1.0);
        // values outside [0, 1] are clamped before comparison
        assert_eq!(image_mse(&ones.map(|v| v * 3.0), &ones).unwrap(), 0.0);
        assert!(image_mse(&zeros, &Tensor::zeros(&[16])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::from_fn(&[2, 7], |_| rng.gen_range(0.0..1.0));
        let b = Tensor::from_fn(&[2, 7], |_| rng.gen_range(0.0..1.0));
        let mut naive = 0.0;
        for i in 0..14 {
            naive += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((image_mse(&a, &b).unwrap() - naive / 14.0).abs() < 1e-15);
    }

    #[test]
    fn layer_distances_decompose_and_match_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_set(&mut rng);
        let b = random_set(&mut rng);
        let d = per_layer_distance(&a, &b).unwrap();
        let mut total = 0.0;
        for (name, ta) in a.iter() {
            let tb = b.get(name).unwrap();
            let mut s = 0.0;
            for i in 0..ta.numel() {
                s += (ta.data()[i] - tb.data()[i]).powi(2);
            }
            assert!((d[name].sum - s).abs() < 1e-15);
            assert!((d[name].mse * ta.numel() as f64 - s).abs() < 1e-12);
            total += s;
        }
        let recomposed: f64 = a.iter().map(|(n, t)| d[n].mse * t.numel() as f64).sum();
        assert!((recomposed - total).abs() < 1e-12);
        assert!(per_layer_distance(&a, &a).unwrap().values().all(|l| l.mse == 0.0));
    }

    #[test]
    fn token_match_examples() {
        assert_eq!(match_tokens(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(match_tokens(&[4, 5, 6], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(match_tokens(&[1, 9, 3, 9], &[1, 2, 3, 4]).unwrap(), 0.5);
        assert!(match_tokens(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn defendability_boundary_is_half_open() {
        assert_eq!(judge_defendability(1e-4, 0.05), Verdict::Leaked);
        assert_eq!(judge_defendability(0.3, 0.05), Verdict::Defended);
        assert_eq!(judge_defendability(0.05, 0.05), Verdict::Defended);
    }

    #[test]
    fn matching_recovers_a_shuffled_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = Tensor::from_fn(&[5, 6], |_| rng.gen_range(0.0..1.0));
        let order = [3, 0, 4, 1, 2];
        let mut shuffled = Vec::new();
        for &j in &order {
            shuffled.extend_from_slice(truth.row(j));
        }
        let shuffled = Tensor::new(vec![5, 6], shuffled).unwrap();
        let m = match_samples(&shuffled, &truth, true).unwrap();
        assert_eq!(m.perm, order);
        assert_eq!(m.max(), 0.0);
    }

    proptest! {
        #[test]
        fn verdict_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, t in 0.001f64..0.5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if judge_defendability(lo, t) == Verdict::Defended {
                prop_assert_eq!(judge_defendability(hi, t), Verdict::Defended);
            }
        }

        #[test]
        fn exhaustive_matching_beats_identity(seed in 0u64..200, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_fn(&[n, 3], |_| rng.gen_range(0.0..1.0));
            let b = Tensor::from_fn(&[n, 3], |_| rng.gen_range(0.0..1.0));
            let m = match_samples(&a, &b, true).unwrap();
            let identity: f64 = (0..n).map(|i| mse_slices(a.row(i), b.row(i), true)).sum();
            prop_assert!(m.per_sample.iter().sum::<f64>() <= identity + 1e-15);
            let mut sorted = m.perm.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }
}
