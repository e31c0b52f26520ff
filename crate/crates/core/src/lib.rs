//! Spatial-aware efficient projector (SAEP) for multimodal LLMs.
//!
//! Compresses ViT patch features into a shorter, spatially ordered visual
//! token sequence: multi-level features are stacked per patch, mixed by a
//! pointwise convolution, downsampled by a stride = kernel depthwise
//! convolution plus an average-pool shortcut, flattened and projected to the
//! LLM width. Also provides the cosine-similarity layer analysis used to pick
//! which encoder layers to stack, analytic gradients with finite-difference
//! checks, and a small trainer for a synthetic spatial task.

pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod layers;
pub mod npy;
pub mod optim;
pub mod projector;
pub mod reference;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use grid::FeatureGrid;
pub use layers::{LayerSelection, LayerSimilarityReport};
pub use projector::{
    cost_report, saep_backward, saep_forward, saep_init, CostReport, MultiLevelFeatures,
    SaepConfig, SaepParams, SaepWeights, TokenSequence,
};
pub use tensor::{rand_uniform, Rng, Tensor};
