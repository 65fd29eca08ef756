//! The surrogate classifier.
//!
//! A scene is a set of latent keyframe embeddings. The model pools them
//! with masked multi-head attention (learned query tokens by default),
//! refines the pooled vector through pre-norm residual blocks, applies a
//! normalised projection with dropout, and emits one sigmoid probability
//! per active label.

mod checkpoint;
mod config;
mod surrogate;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{AttentionKind, SurrogateConfig};
pub use surrogate::{threshold_probs, ForwardCache, SceneView, SurrogateModel};

/// Binary label vector; one entry in {0,1} per active taxonomy label.
pub type LabelVector = Vec<u8>;
