//! Gradient leakage laboratory.
//!
//! Reconstructs private training inputs and labels from shared gradients by
//! optimizing dummy data until its gradients match the observed ones, and
//! measures how gradient perturbation, low precision and sparsification
//! defend against it.

pub mod attack;
pub mod autodiff;
pub mod defenses;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;

pub use autodiff::{Graph, NodeId, Tensor};
pub use error::{Error, Result};
