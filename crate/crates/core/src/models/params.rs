use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Ordered name -> tensor map. Serves as both the weights W of a model and a
/// gradient set aligned to them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorSet {
    entries: IndexMap<String, Tensor>,
}

/// Trainable weights of a model.
pub type ParamSet = TensorSet;
/// Gradients aligned key-for-key with a [`ParamSet`].
pub type GradSet = TensorSet;

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Same keys in the same order, with matching shapes.
    pub fn check_aligned(&self, other: &TensorSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::KeyMismatch(format!(
                "{} entries vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb {
                return Err(Error::KeyMismatch(format!("`{ka}` vs `{kb}`")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::KeyMismatch(format!(
                    "`{ka}` has shape {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Entries restricted to `names`, in that order.
    pub fn select(&self, names: &[String]) -> Result<TensorSet> {
        let mut out = TensorSet::new();
        for n in names {
            let v = self
                .get(n)
                .ok_or_else(|| Error::KeyMismatch(format!("missing `{n}`")))?;
            out.insert(n.clone(), v.clone());
        }
        Ok(out)
    }

    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> TensorSet {
        TensorSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), f(k, v)))
                .collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> TensorSet {
        self.map(|_, t| t.map(|v| v * c))
    }

    /// Elementwise combination of two aligned sets.
    pub fn zip_with(&self, other: &TensorSet, f: impl Fn(f64, f64) -> f64) -> Result<TensorSet> {
        self.check_aligned(other)?;
        let mut out = TensorSet::new();
        for ((k, a), b) in self.entries.iter().zip(other.entries.values()) {
            out.insert(k.clone(), a.zip_map(b, &f)?);
        }
        Ok(out)
    }

    /// All elements concatenated in key order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Bitwise equality of keys, shapes and elements.
    pub fn bit_identical(&self, other: &TensorSet) -> bool {
        self.check_aligned(other).is_ok()
            && self
                .entries
                .values()
                .zip(other.entries.values())
                .all(|(a, b)| {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

impl FromIterator<(String, Tensor)> for TensorSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        TensorSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// `W - lr * grad`, elementwise.
pub fn sgd_step(params: &ParamSet, grads: &GradSet, lr: f64) -> Result<ParamSet> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be >= 0")));
    }
    params.zip_with(grads, |w, g| w - lr * g)
}
