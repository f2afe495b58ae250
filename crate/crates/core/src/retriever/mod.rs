//! Cosine-space retriever: a linear embedding head trained with a pairwise
//! large-margin cosine objective, and an exact top-k index over its outputs.

mod head;
mod index;
mod loss;
mod train;
mod triplet;

pub use head::{load_head, save_head, EmbeddingHead, EmbeddingVector, HEAD_MAGIC};
pub use index::{build_index, load_index, save_index, CosineIndex, Hit, INDEX_MAGIC};
pub use loss::{
    cosface_backward, cosface_loss, softplus, triplet_loss, EmbeddedTriplet, FeatureTriplet,
    HeadGradient,
};
pub use train::{cosine_lr, train, AdamW, TrainOutcome};
pub use triplet::{sample_triplets, Triplet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training hyperparameters for the embedding head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CosFaceConfig {
    /// Logit scale.
    pub s: f64,
    /// Additive margin on the positive-pair cosine.
    pub m: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for CosFaceConfig {
    fn default() -> Self {
        Self {
            s: 64.0,
            m: 0.35,
            batch_size: 32,
            epochs: 500,
            lr: 1e-4,
            weight_decay: 1e-4,
            embed_dim: 64,
            seed: 0,
        }
    }
}

impl CosFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::InvalidConfig(format!("scale s must be positive, got {}", self.s)));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::InvalidConfig(format!("margin m must lie in [0, 1), got {}", self.m)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidConfig("embed_dim must be at least 2".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}
