//! Model hyperparameters and the parameter-count formula.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the pooling stage attends over the keyframe sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Learned query tokens cross-attend to the input sequence (default).
    Cross,
    /// The sequence attends over itself; pooling averages unmasked outputs.
    SelfAttention,
}

/// Architecture hyperparameters. `n_labels` is normally filled in from the
/// taxonomy when an experiment is resolved; 0 means "not resolved yet" and
/// fails validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub n_heads: usize,
    pub n_queries: usize,
    pub hidden_dim: usize,
    pub n_residual_blocks: usize,
    pub dropout_p: f64,
    pub n_labels: usize,
    pub use_attention: bool,
    pub attention_kind: AttentionKind,
    pub init_seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            embed_dim: 256,
            attn_dim: 128,
            n_heads: 4,
            n_queries: 4,
            hidden_dim: 256,
            n_residual_blocks: 3,
            dropout_p: 0.1,
            n_labels: 0,
            use_attention: true,
            attention_kind: AttentionKind::Cross,
            init_seed: 0,
        }
    }
}

impl SurrogateConfig {
    /// The default architecture sized for a given label count.
    pub fn default_for(n_labels: usize) -> Self {
        SurrogateConfig {
            n_labels,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.attn_dim == 0
            || self.n_heads == 0
            || self.n_queries == 0
            || self.hidden_dim == 0
        {
            return Err(Error::Config(
                "model dimensions must all be positive".into(),
            ));
        }
        if self.attn_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "attn_dim {} is not divisible by n_heads {}",
                self.attn_dim, self.n_heads
            )));
        }
        if self.n_labels == 0 {
            return Err(Error::Config(
                "n_labels must be at least 1 (unresolved config?)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    ///
    /// With E = embed_dim, A = attn_dim, H = hidden_dim, C = n_labels,
    /// Q = n_queries, B = n_residual_blocks:
    ///
    /// * pooling, cross-attention: `Q·A + 2·E·A + A + A² + A`
    ///   (query tokens; key and value projections; output projection)
    /// * pooling, self-attention: `3·E·A + 2A + A² + A`
    ///   (query, key, value projections; output projection)
    ///
    /// The key projection carries no bias: a shared offset on every key
    /// shifts each softmax row by a constant, so such a bias has exactly
    /// zero gradient and is unlearnable.
    /// * pooling, no attention: `E·A + A` (linear lift of the mean)
    /// * residual blocks: `B · (2A + A·H + H + H·A + A)`
    ///   (norm affine; two linear layers)
    /// * projection: `A·H + H + 2H` (linear; norm affine)
    /// * head: `H·C + C`
    ///
    /// Running normalisation statistics are state, not parameters, and are
    /// not counted.
    pub fn param_count(&self) -> usize {
        let (e, a, h, c, q, b) = (
            self.embed_dim,
            self.attn_dim,
            self.hidden_dim,
            self.n_labels,
            self.n_queries,
            self.n_residual_blocks,
        );
        let pooling = if !self.use_attention {
            e * a + a
        } else {
            match self.attention_kind {
                AttentionKind::Cross => q * a + 2 * e * a + a + a * a + a,
                AttentionKind::SelfAttention => 3 * e * a + 2 * a + a * a + a,
            }
        };
        let blocks = b * (2 * a + a * h + h + h * a + a);
        let proj = a * h + h + 2 * h;
        let head = h * c + c;
        pooling + blocks + proj + head
    }

    /// Digest of the serialised config (order of fields is fixed).
    pub fn digest_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        crate::digest::fnv1a64_hex(json.as_bytes())
    }
}
