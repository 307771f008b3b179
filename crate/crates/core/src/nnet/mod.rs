//! Keypoint network: a shared per-point encoder with max-pooled global
//! context, a softmax head producing the probability matrix, and a dense
//! decoder reconstructing the cloud from the keypoints. Gradients are
//! propagated by hand.

pub mod adam;
pub mod checkpoint;
pub mod model;

use thiserror::Error;

use crate::pcloud::CloudError;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{backward, forward, init_params, Dense, Forward, Gradients, ModelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model dimensions K={k}, M={m} (need K >= 2, M >= 1)")]
    InvalidDims { k: usize, m: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("activation cache is from parameter revision {cached}, parameters are at {current}")]
    StaleCache { cached: u64, current: u64 },
    #[error(transparent)]
    Cloud(#[from] CloudError),
}
