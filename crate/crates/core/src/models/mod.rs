//! Small twice-differentiable classifiers with sigmoid activations and
//! soft-label cross-entropy.

mod params;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Padding, Tensor};
use crate::error::{Error, Result};

pub use params::{sgd_step, GradSet, ParamSet, TensorSet};

/// Name of the embedding table of an embedding classifier.
pub const EMBEDDING: &str = "embed.weight";

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub padding: Padding,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelKind {
    /// Dense layers over a flat input vector.
    Mlp { input: usize, hidden: Vec<usize> },
    /// Stride-1 convolutions over a `[channels, height, width]` image, then
    /// dense layers.
    ConvNet {
        input: [usize; 3],
        conv: Vec<ConvLayer>,
        hidden: Vec<usize>,
    },
    /// Token ids looked up in an embedding table, concatenated, then dense
    /// layers.
    EmbedClassifier {
        vocab: usize,
        embed_dim: usize,
        seq_len: usize,
        hidden: Vec<usize>,
    },
}

/// Architecture of a classifier. Every hidden layer uses a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub classes: usize,
}

struct ParamShape {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

impl ModelSpec {
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp {
                input,
                hidden: hidden.to_vec(),
            },
            classes,
        }
    }

    pub fn convnet(input: [usize; 3], conv: Vec<ConvLayer>, hidden: &[usize], classes: usize) -> Self {
        Self {
            kind: ModelKind::ConvNet {
                input,
                conv,
                hidden: hidden.to_vec(),
            },
            classes,
        }
    }

    pub fn embed_classifier(vocab: usize, embed_dim: usize, seq_len: usize, hidden: &[usize], classes: usize) -> Self {
        Self {
            kind: ModelKind::EmbedClassifier {
                vocab,
                embed_dim,
                seq_len,
                hidden: hidden.to_vec(),
            },
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model: {m}")));
        if self.classes < 2 {
            return bad("at least two classes required");
        }
        let hidden = match &self.kind {
            ModelKind::Mlp { input, hidden } => {
                if *input == 0 {
                    return bad("empty input");
                }
                hidden
            }
            ModelKind::ConvNet { input, conv, hidden } => {
                if input.contains(&0) {
                    return bad("empty input");
                }
                let (mut h, mut w) = (input[1], input[2]);
                for c in conv {
                    if c.channels == 0 || c.kernel == 0 {
                        return bad("empty conv layer");
                    }
                    if c.padding == Padding::Same && c.kernel % 2 == 0 {
                        return bad("same padding needs an odd kernel");
                    }
                    let p = 2 * c.padding.amount(c.kernel);
                    if h + p < c.kernel || w + p < c.kernel {
                        return bad("kernel larger than feature map");
                    }
                    h = h + p + 1 - c.kernel;
                    w = w + p + 1 - c.kernel;
                }
                hidden
            }
            ModelKind::EmbedClassifier {
                vocab,
                embed_dim,
                seq_len,
                hidden,
            } => {
                if *vocab == 0 || *embed_dim == 0 || *seq_len == 0 {
                    return bad("empty embedding classifier");
                }
                hidden
            }
        };
        if hidden.contains(&0) {
            return bad("zero-width hidden layer");
        }
        Ok(())
    }

    /// Shape of one sample as fed to the differentiable part of the model.
    /// For the embedding classifier this is embedding space, `[seq_len, dim]`.
    pub fn sample_shape(&self) -> Vec<usize> {
        match &self.kind {
            ModelKind::Mlp { input, .. } => vec![*input],
            ModelKind::ConvNet { input, .. } => input.to_vec(),
            ModelKind::EmbedClassifier { embed_dim, seq_len, .. } => vec![*seq_len, *embed_dim],
        }
    }

    /// Whether inputs are images with pixels in `[0, 1]`.
    pub fn is_image(&self) -> bool {
        !matches!(self.kind, ModelKind::EmbedClassifier { .. })
    }

    pub fn image_dims(&self) -> Option<[usize; 3]> {
        match &self.kind {
            ModelKind::ConvNet { input, .. } => Some(*input),
            ModelKind::Mlp { input, .. } => {
                let side = (*input as f64).sqrt().round() as usize;
                Some(if side * side == *input { [1, side, side] } else { [1, 1, *input] })
            }
            ModelKind::EmbedClassifier { .. } => None,
        }
    }

    fn hidden(&self) -> &[usize] {
        match &self.kind {
            ModelKind::Mlp { hidden, .. }
            | ModelKind::ConvNet { hidden, .. }
            | ModelKind::EmbedClassifier { hidden, .. } => hidden,
        }
    }

    fn param_shapes(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize| out.push(ParamShape { name, shape, fan_in });
        let mut width = match &self.kind {
            ModelKind::Mlp { input, .. } => *input,
            ModelKind::ConvNet { input, conv, .. } => {
                let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
                for (i, layer) in conv.iter().enumerate() {
                    let fan_in = c * layer.kernel * layer.kernel;
                    push(format!("conv{i}.weight"), vec![layer.channels, c, layer.kernel, layer.kernel], fan_in);
                    push(format!("conv{i}.bias"), vec![layer.channels], fan_in);
                    let p = 2 * layer.padding.amount(layer.kernel);
                    c = layer.channels;
                    h = h + p + 1 - layer.kernel;
                    w = w + p + 1 - layer.kernel;
                }
                c * h * w
            }
            ModelKind::EmbedClassifier {
                vocab,
                embed_dim,
                seq_len,
                ..
            } => {
                push(EMBEDDING.to_string(), vec![*vocab, *embed_dim], 1);
                seq_len * embed_dim
            }
        };
        let hidden = self.hidden().to_vec();
        for (i, &out_w) in hidden.iter().chain(std::iter::once(&self.classes)).enumerate() {
            push(format!("fc{i}.weight"), vec![out_w, width], width);
            push(format!("fc{i}.bias"), vec![out_w], width);
            width = out_w;
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_shapes().into_iter().map(|p| p.name).collect()
    }

    /// Parameters whose gradients are matched by the attack. The embedding
    /// table is excluded: a dummy that lives in embedding space never touches
    /// it.
    pub fn shared_param_names(&self) -> Vec<String> {
        self.param_names().into_iter().filter(|n| n != EMBEDDING).collect()
    }

    /// Register `params` as named leaves of `g`.
    pub fn param_leaves(&self, g: &mut Graph, params: &ParamSet, names: &[String]) -> Result<IndexMap<String, NodeId>> {
        let mut out = IndexMap::new();
        for name in names {
            let t = params
                .get(name)
                .ok_or_else(|| Error::KeyMismatch(format!("missing parameter `{name}`")))?;
            out.insert(name.clone(), g.leaf(name.as_str(), t.clone())?);
        }
        Ok(out)
    }

    /// Logits `[N, classes]` for input `x` of shape `[N, sample_shape..]`.
    pub fn logits(&self, g: &mut Graph, params: &IndexMap<String, NodeId>, x: NodeId) -> Result<NodeId> {
        let xs = g.shape(x).to_vec();
        if xs.len() != self.sample_shape().len() + 1 || xs[1..] != self.sample_shape()[..] {
            return Err(Error::shape(
                "model input",
                format!("expected [N, {:?}], got {xs:?}", self.sample_shape()),
            ));
        }
        let n = xs[0];
        let p = |name: &str| {
            params
                .get(name)
                .copied()
                .ok_or_else(|| Error::KeyMismatch(format!("missing parameter `{name}`")))
        };
        let mut h = x;
        if let ModelKind::ConvNet { conv, .. } = &self.kind {
            for (i, layer) in conv.iter().enumerate() {
                let y = g.conv2d(h, p(&format!("conv{i}.weight"))?, layer.padding)?;
                let ys = g.shape(y).to_vec();
                let b = g.reshape(p(&format!("conv{i}.bias"))?, &[ys[1], 1, 1])?;
                let b = g.broadcast(b, &ys)?;
                let z = g.add(y, b)?;
                h = g.sigmoid(z)?;
            }
        }
        let flat: usize = g.shape(h)[1..].iter().product();
        if g.shape(h).len() != 2 {
            h = g.reshape(h, &[n, flat])?;
        }
        let layers = self.hidden().len() + 1;
        for i in 0..layers {
            let w = p(&format!("fc{i}.weight"))?;
            let y = g.matmul_t(h, w, false, true)?;
            let b = g.broadcast(p(&format!("fc{i}.bias"))?, g.shape(y).to_vec().as_slice())?;
            let z = g.add(y, b)?;
            h = if i + 1 < layers { g.sigmoid(z)? } else { z };
        }
        Ok(h)
    }
}

/// Weights drawn uniformly from `±1/sqrt(fan_in)` (the embedding table from
/// `±1`), reproducible from `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamSet::new();
    for p in spec.param_shapes() {
        let bound = 1.0 / (p.fan_in as f64).sqrt();
        let t = Tensor::from_fn(&p.shape, |_| rng.gen_range(-bound..bound));
        out.insert(p.name, t);
    }
    Ok(out)
}

/// `-(1/N) * sum(target * log softmax(logits))`.
pub fn soft_cross_entropy(g: &mut Graph, logits: NodeId, target: NodeId) -> Result<NodeId> {
    let n = g.shape(logits)[0] as f64;
    let probs = g.softmax(logits)?;
    let logp = g.log(probs)?;
    let prod = g.mul(target, logp)?;
    let total = g.sum_all(prod)?;
    g.scalar_mul(total, -1.0 / n)
}

/// A loss expression together with the handles needed to differentiate it.
pub struct LossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    /// Continuous model input (embedding-space for the embedding classifier).
    pub input: NodeId,
    pub logits: NodeId,
    pub params: IndexMap<String, NodeId>,
}

impl LossGraph {
    /// Detached gradients of the loss with respect to every parameter.
    pub fn param_gradients(&mut self) -> Result<GradSet> {
        let ids: Vec<NodeId> = self.params.values().copied().collect();
        let grads = self.graph.grad2(self.loss, &ids)?;
        Ok(self.params.keys().cloned().zip(grads).collect())
    }
}

fn check_labels(spec: &ModelSpec, n: usize, y: &Tensor) -> Result<()> {
    if y.shape() != [n, spec.classes] {
        return Err(Error::shape(
            "labels",
            format!("expected [{n}, {}], got {:?}", spec.classes, y.shape()),
        ));
    }
    for r in 0..n {
        let row = y.row(r);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::LabelNotNormalized { row: r, sum });
        }
    }
    Ok(())
}

/// Mean soft-label cross-entropy of the model on `x` (shape `[N, sample..]`)
/// against `y` (rows on the probability simplex), in a fresh graph.
pub fn forward_loss(spec: &ModelSpec, params: &ParamSet, x: &Tensor, y: &Tensor) -> Result<LossGraph> {
    spec.validate()?;
    let n = *x.shape().first().ok_or_else(|| Error::shape("model input", "missing batch axis"))?;
    check_labels(spec, n, y)?;
    let mut g = Graph::new();
    let names = spec.param_names();
    let pnodes = spec.param_leaves(&mut g, params, &names)?;
    let input = g.leaf("input", x.clone())?;
    let logits = spec.logits(&mut g, &pnodes, input)?;
    let target = g.constant(y.clone());
    let loss = soft_cross_entropy(&mut g, logits, target)?;
    Ok(LossGraph {
        graph: g,
        loss,
        input,
        logits,
        params: pnodes,
    })
}

/// Loss of the embedding classifier on token ids. The gathered embeddings
/// are `input` of the returned graph, so they can be differentiated
/// directly.
pub fn embed_forward(spec: &ModelSpec, params: &ParamSet, tokens: &[Vec<usize>], y: &Tensor) -> Result<LossGraph> {
    let ModelKind::EmbedClassifier {
        vocab,
        embed_dim,
        seq_len,
        ..
    } = spec.kind
    else {
        return Err(Error::InvalidArgument("embed_forward needs an embedding classifier".into()));
    };
    spec.validate()?;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::shape("tokens", "empty batch"));
    }
    check_labels(spec, n, y)?;
    let mut onehot = Tensor::zeros(&[n * seq_len, vocab]);
    for (s, sentence) in tokens.iter().enumerate() {
        if sentence.len() != seq_len {
            return Err(Error::shape(
                "tokens",
                format!("sentence {s} has {} tokens, expected {seq_len}", sentence.len()),
            ));
        }
        for (pos, &id) in sentence.iter().enumerate() {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            onehot.data_mut()[(s * seq_len + pos) * vocab + id] = 1.0;
        }
    }
    let mut g = Graph::new();
    let names = spec.param_names();
    let pnodes = spec.param_leaves(&mut g, params, &names)?;
    let select = g.constant(onehot);
    let rows = g.matmul(select, pnodes[EMBEDDING])?;
    let input = g.reshape(rows, &[n, seq_len, embed_dim])?;
    let logits = spec.logits(&mut g, &pnodes, input)?;
    let target = g.constant(y.clone());
    let loss = soft_cross_entropy(&mut g, logits, target)?;
    Ok(LossGraph {
        graph: g,
        loss,
        input,
        logits,
        params: pnodes,
    })
}

/// Gradients of the mean loss on `(x, y)` for every parameter.
pub fn true_gradients(spec: &ModelSpec, params: &ParamSet, x: &Tensor, y: &Tensor) -> Result<GradSet> {
    forward_loss(spec, params, x, y)?.param_gradients()
}

pub fn true_gradients_tokens(spec: &ModelSpec, params: &ParamSet, tokens: &[Vec<usize>], y: &Tensor) -> Result<GradSet> {
    embed_forward(spec, params, tokens, y)?.param_gradients()
}

/// Embedding rows for the given token ids, shaped `[N, seq_len, dim]`.
pub fn embed_tokens(params: &ParamSet, tokens: &[Vec<usize>]) -> Result<Tensor> {
    let table = params
        .get(EMBEDDING)
        .ok_or_else(|| Error::KeyMismatch(format!("missing `{EMBEDDING}`")))?;
    let (vocab, dim) = (table.shape()[0], table.shape()[1]);
    let len = tokens.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(tokens.len() * len * dim);
    for sentence in tokens {
        for &id in sentence {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(table.row(id));
        }
    }
    Tensor::new(vec![tokens.len(), len, dim], data)
}

/// One-hot rows for class ids.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels".into()));
    }
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidArgument(format!("label {c} >= {classes} classes")));
        }
        t.data_mut()[i * classes + c] = 1.0;
    }
    Ok(t)
}
