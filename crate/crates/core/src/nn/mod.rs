//! Minimal neural-network toolkit: named parameter stores, a reverse-mode
//! tape, initializers and the Adam optimizer.

pub mod graph;
pub mod optim;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub use graph::{BnBatchStats, Graph, Var};
pub use optim::{cosine_annealing_lr, Adam, AdamConfig};

/// Named tensors in a deterministic (lexicographic) order.
pub type ParamStore = BTreeMap<String, Tensor>;

pub fn param_count(store: &ParamStore) -> usize {
    store.values().map(Tensor::len).sum()
}

/// Fan-in scaled normal init (He), suited to ReLU stacks.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

/// Fan-in scaled normal init without the ReLU gain.
pub fn lecun_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (1.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

pub fn all_finite(store: &ParamStore) -> bool {
    store.values().all(Tensor::is_finite)
}
