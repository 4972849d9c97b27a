//! Datasets and the private batches workers train on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DataSource;
use super::io;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{
    embed_tokens, one_hot, true_gradients, true_gradients_tokens, GradSet, ModelKind, ModelSpec, ParamSet,
};

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// `[N, sample..]` with pixels in `[0, 1]`.
    Images(Tensor),
    Tokens(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
}

/// Images of `count` smooth Gaussian blobs each, clamped to `[0, 1]`.
pub fn blob_images(count: usize, dims: [usize; 3], seed: u64) -> Tensor {
    let [c, h, w] = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(count * c * h * w);
    for _ in 0..count {
        for _ in 0..c {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..=4))
                .map(|_| {
                    let cy = rng.gen_range(0.0..h as f64);
                    let cx = rng.gen_range(0.0..w as f64);
                    let sigma = rng.gen_range(1.0..(h.max(w) as f64 / 3.0).max(1.5));
                    let amp = rng.gen_range(0.3..1.0);
                    (cy, cx, sigma, amp)
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let v: f64 = blobs
                        .iter()
                        .map(|&(cy, cx, s, a)| {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            a * (-d2 / (2.0 * s * s)).exp()
                        })
                        .sum();
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Tensor::new(vec![count, c, h, w], data).expect("sized above")
}

impl Dataset {
    /// Build the dataset named by `source`, shaped for `spec`.
    pub fn load(source: &DataSource, spec: &ModelSpec, seed: u64) -> Result<Self> {
        let classes = spec.classes;
        let ds = match source {
            DataSource::Synthetic { size } => {
                let dims = spec
                    .image_dims()
                    .ok_or_else(|| Error::InvalidArgument("synthetic images need an image model".into()))?;
                let images = blob_images(*size, dims, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let labels = (0..*size).map(|_| rng.gen_range(0..classes)).collect();
                Dataset {
                    inputs: Inputs::Images(images),
                    labels,
                }
            }
            DataSource::Idx { images, labels } => {
                let (x, y) = io::load_idx(images, labels)?;
                Dataset {
                    inputs: Inputs::Images(x),
                    labels: y,
                }
            }
            DataSource::Ppm { dir } => {
                let (x, y) = io::load_image_dir(dir)?;
                Dataset {
                    inputs: Inputs::Images(x),
                    labels: y,
                }
            }
            DataSource::Tokens { path } => {
                let ModelKind::EmbedClassifier { vocab, seq_len, .. } = spec.kind else {
                    return Err(Error::InvalidArgument("token data needs an embedding classifier".into()));
                };
                let (sentences, labels) = match path {
                    Some(p) => io::load_tokens(p)?,
                    None => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let n = 64;
                        let s = (0..n)
                            .map(|_| (0..seq_len).map(|_| rng.gen_range(0..vocab)).collect())
                            .collect();
                        (s, (0..n).map(|_| rng.gen_range(0..classes)).collect())
                    }
                };
                Dataset {
                    inputs: Inputs::Tokens(sentences),
                    labels,
                }
            }
        };
        ds.check(spec)?;
        Ok(ds)
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if let Some(&c) = self.labels.iter().find(|&&c| c >= spec.classes) {
            return Err(Error::InvalidArgument(format!("label {c} >= {} classes", spec.classes)));
        }
        match &self.inputs {
            Inputs::Images(x) => {
                let per: usize = x.shape()[1..].iter().product();
                let want: usize = spec.sample_shape().iter().product();
                if per != want || !spec.is_image() {
                    return Err(Error::shape(
                        "dataset",
                        format!("samples of {per} values do not fit model input {:?}", spec.sample_shape()),
                    ));
                }
            }
            Inputs::Tokens(s) => {
                let ModelKind::EmbedClassifier { vocab, seq_len, .. } = spec.kind else {
                    return Err(Error::InvalidArgument("token data needs an embedding classifier".into()));
                };
                for sentence in s {
                    if sentence.len() != seq_len {
                        return Err(Error::shape("dataset", format!("sentence of {} tokens", sentence.len())));
                    }
                    if let Some(&id) = sentence.iter().find(|&&id| id >= vocab) {
                        return Err(Error::TokenOutOfRange { id, vocab });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The samples at `indices`, reshaped to the model's input.
    pub fn batch(&self, indices: &[usize], spec: &ModelSpec) -> Result<Batch> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let input = match &self.inputs {
            Inputs::Images(x) => {
                let per: usize = x.shape()[1..].iter().product();
                let mut data = Vec::with_capacity(indices.len() * per);
                for &i in indices {
                    data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
                }
                let mut shape = vec![indices.len()];
                shape.extend(spec.sample_shape());
                BatchInput::Images(Tensor::new(shape, data)?)
            }
            Inputs::Tokens(s) => BatchInput::Tokens(indices.iter().map(|&i| s[i].clone()).collect()),
        };
        Ok(Batch { input, labels })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchInput {
    Images(Tensor),
    Tokens(Vec<Vec<usize>>),
}

/// A worker's private batch for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: BatchInput,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn targets(&self, spec: &ModelSpec) -> Result<Tensor> {
        one_hot(&self.labels, spec.classes)
    }

    pub fn gradients(&self, spec: &ModelSpec, params: &ParamSet) -> Result<GradSet> {
        let y = self.targets(spec)?;
        match &self.input {
            BatchInput::Images(x) => true_gradients(spec, params, x, &y),
            BatchInput::Tokens(t) => true_gradients_tokens(spec, params, t, &y),
        }
    }

    /// What the attacker tries to reconstruct: pixels, or embedding rows.
    pub fn truth(&self, params: &ParamSet) -> Result<Tensor> {
        match &self.input {
            BatchInput::Images(x) => Ok(x.clone()),
            BatchInput::Tokens(t) => embed_tokens(params, t),
        }
    }

    pub fn tokens(&self) -> Option<&[Vec<usize>]> {
        match &self.input {
            BatchInput::Tokens(t) => Some(t),
            BatchInput::Images(_) => None,
        }
    }

    /// Concatenate batches in order.
    pub fn concat(batches: &[Batch]) -> Result<Batch> {
        let first = batches.first().ok_or_else(|| Error::InvalidArgument("no batches".into()))?;
        let labels = batches.iter().flat_map(|b| b.labels.iter().copied()).collect();
        let input = match &first.input {
            BatchInput::Images(x0) => {
                let mut data = Vec::new();
                let mut n = 0;
                for b in batches {
                    let BatchInput::Images(x) = &b.input else {
                        return Err(Error::InvalidArgument("mixed batch kinds".into()));
                    };
                    data.extend_from_slice(x.data());
                    n += x.shape()[0];
                }
                let mut shape = x0.shape().to_vec();
                shape[0] = n;
                BatchInput::Images(Tensor::new(shape, data)?)
            }
            BatchInput::Tokens(_) => BatchInput::Tokens(
                batches
                    .iter()
                    .flat_map(|b| b.tokens().unwrap_or_default().iter().cloned())
                    .collect(),
            ),
        };
        Ok(Batch { input, labels })
    }
}
