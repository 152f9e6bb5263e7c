//! Extreme multilabel classifier: a shared feature embedding, a label-tree
//! shortlister and one-vs-all classifiers mixing label features with free
//! refinement vectors.

mod model;
mod train;
mod tree;

pub use model::XmlModel;
pub use train::train;
pub use tree::{balanced_two_means_cost, cluster_labels, LabelTree, TreeNode};

pub use crate::ranking::{filter_by_specialty, RankedPrediction};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    pub b_factors: u32,
    pub beam: usize,
    /// Epochs for the tree scorers.
    pub tree_epochs: usize,
    /// Epochs for the classifiers.
    pub epochs: usize,
    pub learning_rate: f32,
    pub negatives_per_positive: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub top_b: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embedding_dim: 32,
            b_factors: 7,
            beam: 30,
            tree_epochs: 10,
            epochs: 15,
            learning_rate: 0.1,
            negatives_per_positive: 20,
            batch_size: 20,
            seed: 0,
            top_b: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if self.b_factors > 24 {
            return bad("b_factors must be at most 24");
        }
        if self.beam == 0 {
            return bad("beam must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.top_b == 0 {
            return bad("top_b must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
