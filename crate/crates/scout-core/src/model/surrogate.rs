//! Model construction, forward pass, prediction, and hand-written backward.
//!
//! Scenes are processed one at a time for the pooling stage (keyframe
//! counts differ) and as one batch matrix afterwards. Per-scene work runs
//! in fixed-size chunks: chunks may execute on any number of threads, but
//! gradients are reduced chunk-by-chunk in index order, so results are
//! bitwise independent of thread count.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{
    add_row_bias, batchnorm_backward_eval, batchnorm_backward_train, batchnorm_forward_eval,
    batchnorm_forward_train, dropout_backward, dropout_forward, layernorm_backward,
    layernorm_forward, masked_mean_rows, masked_softmax, masked_softmax_backward, relu,
    relu_backward, sigmoid, BatchNormCache, LayerNormCache, Matrix, Mode, Param,
};

use super::{AttentionKind, LabelVector, SurrogateConfig};

/// Scenes processed per work unit in batched forward/backward passes.
const SCENE_CHUNK: usize = 8;
/// Output probabilities are clamped into (0,1) so downstream thresholding
/// at exactly 0 or 1 behaves as documented even for saturated logits.
const PROB_FLOOR: f64 = 1e-12;

/// Borrowed view of one scene's inputs.
#[derive(Debug, Clone, Copy)]
pub struct SceneView<'a> {
    pub embeddings: &'a Matrix,
    pub mask: &'a [bool],
}

/// Which statistics the projection norm uses in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormMode {
    /// Batch statistics (training); running stats get an update.
    Batch,
    /// Running statistics (evaluation and frozen gradient checking).
    Running,
}

/// Per-scene activations saved by the pooling stage.
enum SceneCache {
    Cross {
        x: Matrix,
        v: Matrix,
        /// Per-head attention weights, each n_queries × seq_len.
        attn: Vec<Matrix>,
        ctx: Matrix,
        k: Matrix,
    },
    SelfAttn {
        x: Matrix,
        q: Matrix,
        k: Matrix,
        v: Matrix,
        /// Per-head attention weights, each seq_len × seq_len.
        attn: Vec<Matrix>,
        ctx: Matrix,
        mask: Vec<bool>,
    },
    MeanLift {
        /// Masked mean of the input frames, 1 × embed_dim.
        mean: Matrix,
    },
}

/// Per-block saved activations.
struct BlockCache {
    ln: LayerNormCache,
    /// Post-norm input to the block's first linear layer.
    n: Matrix,
    /// Post-ReLU hidden activations.
    a1: Matrix,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    scenes: Vec<SceneCache>,
    blocks: Vec<BlockCache>,
    p_final: Matrix,
    bn: BatchNormCache,
    norm_mode: NormMode,
    /// Post-ReLU activations of the projection layer.
    r: Matrix,
    dropout_factors: Option<Vec<f64>>,
    /// Head input (post-dropout).
    dropped: Matrix,
}

/// The attention-pooled residual classifier.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    config: SurrogateConfig,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    bn_running_mean: Vec<f64>,
    bn_running_var: Vec<f64>,
}

/// (name, rows, cols, decays) for every parameter of a config, in the
/// fixed order used by the optimizer and the checkpoint format.
fn param_specs(cfg: &SurrogateConfig) -> Vec<(String, usize, usize, bool)> {
    let (e, a, h, c, q) = (
        cfg.embed_dim,
        cfg.attn_dim,
        cfg.hidden_dim,
        cfg.n_labels,
        cfg.n_queries,
    );
    let mut specs: Vec<(String, usize, usize, bool)> = Vec::new();
    if cfg.use_attention {
        match cfg.attention_kind {
            AttentionKind::Cross => specs.push(("attn.queries".into(), q, a, true)),
            AttentionKind::SelfAttention => {
                specs.push(("attn.query.w".into(), e, a, true));
                specs.push(("attn.query.b".into(), 1, a, false));
            }
        }
        // No key bias: softmax is invariant to a shared shift of the
        // scores, so a key bias would have identically zero gradient.
        specs.push(("attn.key.w".into(), e, a, true));
        specs.push(("attn.value.w".into(), e, a, true));
        specs.push(("attn.value.b".into(), 1, a, false));
        specs.push(("attn.out.w".into(), a, a, true));
        specs.push(("attn.out.b".into(), 1, a, false));
    } else {
        specs.push(("lift.w".into(), e, a, true));
        specs.push(("lift.b".into(), 1, a, false));
    }
    for t in 0..cfg.n_residual_blocks {
        specs.push((format!("block{t}.norm.gamma"), 1, a, false));
        specs.push((format!("block{t}.norm.beta"), 1, a, false));
        specs.push((format!("block{t}.fc1.w"), a, h, true));
        specs.push((format!("block{t}.fc1.b"), 1, h, false));
        specs.push((format!("block{t}.fc2.w"), h, a, true));
        specs.push((format!("block{t}.fc2.b"), 1, a, false));
    }
    specs.push(("proj.w".into(), a, h, true));
    specs.push(("proj.b".into(), 1, h, false));
    specs.push(("proj.norm.gamma".into(), 1, h, false));
    specs.push(("proj.norm.beta".into(), 1, h, false));
    specs.push(("head.w".into(), h, c, true));
    specs.push(("head.b".into(), 1, c, false));
    specs
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

impl SurrogateModel {
    /// Build a model with seed-derived Glorot-uniform weights, zero biases
    /// and identity norm affines.
    pub fn init(config: SurrogateConfig) -> Result<SurrogateModel> {
        config.validate()?;
        let root = RngState::new(config.init_seed);
        let mut params = Vec::new();
        let mut index = HashMap::new();
        for (name, rows, cols, decay) in param_specs(&config) {
            let value = if decay {
                // Weight matrix: uniform(±√(6/(fan_in+fan_out))), drawn
                // row-major from a stream tied to the parameter name so
                // variants never shift each other's draws.
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                let mut stream = root.child(&name, 0).stream();
                Matrix::from_vec(
                    rows,
                    cols,
                    (0..rows * cols)
                        .map(|_| stream.uniform_in(-limit, limit))
                        .collect(),
                )?
            } else if name.ends_with(".gamma") {
                Matrix::filled(rows, cols, 1.0)
            } else {
                Matrix::zeros(rows, cols)
            };
            index.insert(name.clone(), params.len());
            params.push(Param::new(name, value, decay));
        }
        let hidden = config.hidden_dim;
        Ok(SurrogateModel {
            config,
            params,
            index,
            bn_running_mean: vec![0.0; hidden],
            bn_running_var: vec![1.0; hidden],
        })
    }

    /// Reassemble a model from its serialised pieces (checkpoint loading).
    pub(super) fn from_parts(
        config: SurrogateConfig,
        values: HashMap<String, Matrix>,
        bn_running_mean: Vec<f64>,
        bn_running_var: Vec<f64>,
    ) -> Result<SurrogateModel> {
        config.validate()?;
        let mut params = Vec::new();
        let mut index = HashMap::new();
        let mut values = values;
        for (name, rows, cols, decay) in param_specs(&config) {
            let value = values.remove(&name).ok_or_else(|| {
                Error::Corrupt(format!("checkpoint is missing parameter {name:?}"))
            })?;
            if value.rows() != rows || value.cols() != cols {
                return Err(Error::Corrupt(format!(
                    "parameter {name:?} is {}x{}, config implies {rows}x{cols}",
                    value.rows(),
                    value.cols()
                )));
            }
            index.insert(name.clone(), params.len());
            params.push(Param::new(name, value, decay));
        }
        if let Some(extra) = values.keys().next() {
            return Err(Error::Corrupt(format!(
                "checkpoint has unexpected parameter {extra:?}"
            )));
        }
        if bn_running_mean.len() != config.hidden_dim || bn_running_var.len() != config.hidden_dim
        {
            return Err(Error::Corrupt(
                "running statistics length does not match hidden_dim".into(),
            ));
        }
        Ok(SurrogateModel {
            config,
            params,
            index,
            bn_running_mean,
            bn_running_var,
        })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (&self.bn_running_mean, &self.bn_running_var)
    }

    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.config.hidden_dim || var.len() != self.config.hidden_dim {
            return Err(Error::Shape(
                "running statistics length does not match hidden_dim".into(),
            ));
        }
        self.bn_running_mean = mean;
        self.bn_running_var = var;
        Ok(())
    }

    /// Total trainable parameter count (matches
    /// [`SurrogateConfig::param_count`]).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    #[inline]
    fn pi(&self, name: &str) -> usize {
        self.index[name]
    }

    #[inline]
    fn value(&self, name: &str) -> &Matrix {
        &self.params[self.pi(name)].value
    }

    fn check_scene(&self, i: usize, s: &SceneView) -> Result<()> {
        if s.embeddings.cols() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "scene {i}: embedding width {} vs model embed_dim {}",
                s.embeddings.cols(),
                self.config.embed_dim
            )));
        }
        if s.mask.len() != s.embeddings.rows() {
            return Err(Error::Shape(format!(
                "scene {i}: mask length {} vs {} frames",
                s.mask.len(),
                s.embeddings.rows()
            )));
        }
        if !s.mask.iter().any(|&m| m) {
            return Err(Error::DegenerateMask(format!(
                "scene {i}: every frame is masked"
            )));
        }
        Ok(())
    }

    /// Pool one scene into a length-attn_dim vector.
    fn pool_scene(&self, s: &SceneView) -> Result<(Vec<f64>, SceneCache)> {
        if !self.config.use_attention {
            let mean = masked_mean_rows(s.embeddings, s.mask)?;
            let mean = Matrix::from_vec(1, self.config.embed_dim, mean)?;
            let mut pooled = mean.matmul(self.value("lift.w"))?;
            add_row_bias(&mut pooled, self.value("lift.b").row(0))?;
            return Ok((pooled.into_data(), SceneCache::MeanLift { mean }));
        }
        match self.config.attention_kind {
            AttentionKind::Cross => self.pool_cross(s),
            AttentionKind::SelfAttention => self.pool_self(s),
        }
    }

    fn pool_cross(&self, s: &SceneView) -> Result<(Vec<f64>, SceneCache)> {
        let a_dim = self.config.attn_dim;
        let heads = self.config.n_heads;
        let d = a_dim / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let n_q = self.config.n_queries;
        let seq = s.embeddings.rows();
        let queries = self.value("attn.queries");

        let k = s.embeddings.matmul(self.value("attn.key.w"))?;
        let mut v = s.embeddings.matmul(self.value("attn.value.w"))?;
        add_row_bias(&mut v, self.value("attn.value.b").row(0))?;

        let mut ctx = Matrix::zeros(n_q, a_dim);
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let hr = h * d..(h + 1) * d;
            let mut scores = Matrix::zeros(n_q, seq);
            for qi in 0..n_q {
                let qh = &queries.row(qi)[hr.clone()];
                let row = scores.row_mut(qi);
                for (l, slot) in row.iter_mut().enumerate() {
                    *slot = scale * dot(qh, &k.row(l)[hr.clone()]);
                }
            }
            let weights = masked_softmax(&scores, s.mask)?;
            for qi in 0..n_q {
                let w_row = weights.row(qi).to_vec();
                let ctx_h = &mut ctx.row_mut(qi)[hr.clone()];
                for (l, &w) in w_row.iter().enumerate() {
                    axpy(ctx_h, w, &v.row(l)[hr.clone()]);
                }
            }
            attn.push(weights);
        }
        let mut o = ctx.matmul(self.value("attn.out.w"))?;
        add_row_bias(&mut o, self.value("attn.out.b").row(0))?;
        // Mean over the query outputs.
        let mut pooled = o.col_sums();
        let inv = 1.0 / n_q as f64;
        for p in &mut pooled {
            *p *= inv;
        }
        Ok((
            pooled,
            SceneCache::Cross {
                x: s.embeddings.clone(),
                v,
                attn,
                ctx,
                k,
            },
        ))
    }

    fn pool_self(&self, s: &SceneView) -> Result<(Vec<f64>, SceneCache)> {
        let a_dim = self.config.attn_dim;
        let heads = self.config.n_heads;
        let d = a_dim / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let seq = s.embeddings.rows();

        let mut q = s.embeddings.matmul(self.value("attn.query.w"))?;
        add_row_bias(&mut q, self.value("attn.query.b").row(0))?;
        let k = s.embeddings.matmul(self.value("attn.key.w"))?;
        let mut v = s.embeddings.matmul(self.value("attn.value.w"))?;
        add_row_bias(&mut v, self.value("attn.value.b").row(0))?;

        let mut ctx = Matrix::zeros(seq, a_dim);
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let hr = h * d..(h + 1) * d;
            let mut scores = Matrix::zeros(seq, seq);
            for i in 0..seq {
                let qh = &q.row(i)[hr.clone()];
                let row = scores.row_mut(i);
                for (l, slot) in row.iter_mut().enumerate() {
                    *slot = scale * dot(qh, &k.row(l)[hr.clone()]);
                }
            }
            let weights = masked_softmax(&scores, s.mask)?;
            for i in 0..seq {
                let w_row = weights.row(i).to_vec();
                let ctx_h = &mut ctx.row_mut(i)[hr.clone()];
                for (l, &w) in w_row.iter().enumerate() {
                    axpy(ctx_h, w, &v.row(l)[hr.clone()]);
                }
            }
            attn.push(weights);
        }
        let mut o = ctx.matmul(self.value("attn.out.w"))?;
        add_row_bias(&mut o, self.value("attn.out.b").row(0))?;
        let pooled = masked_mean_rows(&o, s.mask)?;
        Ok((
            pooled,
            SceneCache::SelfAttn {
                x: s.embeddings.clone(),
                q,
                k,
                v,
                attn,
                ctx,
                mask: s.mask.to_vec(),
            },
        ))
    }

    /// Shared forward pass. Returns logits, the cache for backward, and —
    /// in batch-norm mode — the updated running statistics for the caller
    /// to commit.
    fn forward_impl(
        &self,
        scenes: &[SceneView],
        norm_mode: NormMode,
        dropout_rng: Option<&RngState>,
    ) -> Result<(Matrix, ForwardCache, Option<(Vec<f64>, Vec<f64>)>)> {
        if scenes.is_empty() {
            return Err(Error::Shape("forward: empty batch".into()));
        }
        for (i, s) in scenes.iter().enumerate() {
            self.check_scene(i, s)?;
        }
        let a_dim = self.config.attn_dim;

        // Pooling, chunked for determinism-independent parallelism.
        let chunk_results: Vec<Result<Vec<(Vec<f64>, SceneCache)>>> = scenes
            .par_chunks(SCENE_CHUNK)
            .map(|chunk| chunk.iter().map(|s| self.pool_scene(s)).collect())
            .collect();
        let mut pooled = Matrix::zeros(scenes.len(), a_dim);
        let mut scene_caches = Vec::with_capacity(scenes.len());
        let mut row = 0;
        for chunk in chunk_results {
            for (vec, cache) in chunk? {
                pooled.row_mut(row).copy_from_slice(&vec);
                scene_caches.push(cache);
                row += 1;
            }
        }

        // Residual trunk.
        let mut p = pooled;
        let mut blocks = Vec::with_capacity(self.config.n_residual_blocks);
        for t in 0..self.config.n_residual_blocks {
            let gamma = self.value(&format!("block{t}.norm.gamma"));
            let beta = self.value(&format!("block{t}.norm.beta"));
            let (n, ln) = layernorm_forward(&p, gamma.row(0), beta.row(0))?;
            let mut z1 = n.matmul(self.value(&format!("block{t}.fc1.w")))?;
            add_row_bias(&mut z1, self.value(&format!("block{t}.fc1.b")).row(0))?;
            let a1 = relu(&z1);
            let mut z2 = a1.matmul(self.value(&format!("block{t}.fc2.w")))?;
            add_row_bias(&mut z2, self.value(&format!("block{t}.fc2.b")).row(0))?;
            p.add_assign(&z2)?;
            blocks.push(BlockCache { ln, n, a1 });
        }
        let p_final = p;

        // Projection with normalisation, ReLU, dropout.
        let mut zp = p_final.matmul(self.value("proj.w"))?;
        add_row_bias(&mut zp, self.value("proj.b").row(0))?;
        let gamma = self.value("proj.norm.gamma");
        let beta = self.value("proj.norm.beta");
        let (yb, bn, bn_update) = match norm_mode {
            NormMode::Batch => {
                let mut rm = self.bn_running_mean.clone();
                let mut rv = self.bn_running_var.clone();
                let (yb, bn) =
                    batchnorm_forward_train(&zp, gamma.row(0), beta.row(0), &mut rm, &mut rv)?;
                (yb, bn, Some((rm, rv)))
            }
            NormMode::Running => {
                let (yb, bn) = batchnorm_forward_eval(
                    &zp,
                    gamma.row(0),
                    beta.row(0),
                    &self.bn_running_mean,
                    &self.bn_running_var,
                )?;
                (yb, bn, None)
            }
        };
        let r = relu(&yb);
        let (dropped, dropout_factors) = match dropout_rng {
            Some(rng) if self.config.dropout_p > 0.0 => {
                dropout_forward(&r, self.config.dropout_p, rng, Mode::Train)?
            }
            _ => (r.clone(), None),
        };

        let mut logits = dropped.matmul(self.value("head.w"))?;
        add_row_bias(&mut logits, self.value("head.b").row(0))?;

        let cache = ForwardCache {
            scenes: scene_caches,
            blocks,
            p_final,
            bn,
            norm_mode,
            r,
            dropout_factors,
            dropped,
        };
        Ok((logits, cache, bn_update))
    }

    /// Training forward pass: batch statistics, live dropout, running-stat
    /// update. Returns logits (not probabilities) for the loss.
    pub fn train_forward(
        &mut self,
        scenes: &[SceneView],
        dropout_rng: &RngState,
    ) -> Result<(Matrix, ForwardCache)> {
        let (logits, cache, update) =
            self.forward_impl(scenes, NormMode::Batch, Some(dropout_rng))?;
        if let Some((rm, rv)) = update {
            self.bn_running_mean = rm;
            self.bn_running_var = rv;
        }
        Ok((logits, cache))
    }

    /// Deterministic forward pass with frozen normalisation and no dropout,
    /// returning logits and a cache — the configuration under which the
    /// backward pass is gradient-checked.
    pub fn frozen_forward(&self, scenes: &[SceneView]) -> Result<(Matrix, ForwardCache)> {
        let (logits, cache, _) = self.forward_impl(scenes, NormMode::Running, None)?;
        Ok((logits, cache))
    }

    /// Evaluation probabilities for a batch, one row per scene, clamped
    /// into (0,1).
    pub fn forward_batch(&self, scenes: &[SceneView]) -> Result<Matrix> {
        let (logits, _, _) = self.forward_impl(scenes, NormMode::Running, None)?;
        Ok(sigmoid(&logits).map(|p| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)))
    }

    /// Evaluation probabilities for a single scene.
    pub fn forward(&self, embeddings: &Matrix, mask: &[bool]) -> Result<Vec<f64>> {
        let probs = self.forward_batch(&[SceneView { embeddings, mask }])?;
        Ok(probs.into_data())
    }

    /// Threshold probabilities into a label vector (`≥` keeps ties).
    pub fn predict(
        &self,
        embeddings: &Matrix,
        mask: &[bool],
        threshold: f64,
    ) -> Result<LabelVector> {
        let probs = self.forward(embeddings, mask)?;
        Ok(threshold_probs(&probs, threshold))
    }

    /// Accumulate gradients for a batch given d(loss)/d(logits).
    pub fn backward(&mut self, cache: &ForwardCache, d_logits: &Matrix) -> Result<()> {
        if d_logits.rows() != cache.dropped.rows() || d_logits.cols() != self.config.n_labels {
            return Err(Error::Shape(format!(
                "backward: d_logits {}x{} vs batch {}x{}",
                d_logits.rows(),
                d_logits.cols(),
                cache.dropped.rows(),
                self.config.n_labels
            )));
        }
        let mut grads: Vec<(usize, Matrix)> = Vec::new();

        // Head.
        grads.push((self.pi("head.w"), cache.dropped.matmul_tn(d_logits)?));
        grads.push((
            self.pi("head.b"),
            Matrix::from_vec(1, self.config.n_labels, d_logits.col_sums())?,
        ));
        let d_dropped = d_logits.matmul_nt(self.value("head.w"))?;

        // Dropout, ReLU, projection norm.
        let d_r = dropout_backward(&d_dropped, cache.dropout_factors.as_deref());
        let d_yb = relu_backward(&cache.r, &d_r)?;
        let gamma = self.value("proj.norm.gamma");
        let (d_zp, d_gamma, d_beta) = match cache.norm_mode {
            NormMode::Batch => batchnorm_backward_train(&cache.bn, &d_yb, gamma.row(0))?,
            NormMode::Running => batchnorm_backward_eval(&cache.bn, &d_yb, gamma.row(0))?,
        };
        let h = self.config.hidden_dim;
        grads.push((self.pi("proj.norm.gamma"), Matrix::from_vec(1, h, d_gamma)?));
        grads.push((self.pi("proj.norm.beta"), Matrix::from_vec(1, h, d_beta)?));
        grads.push((self.pi("proj.w"), cache.p_final.matmul_tn(&d_zp)?));
        grads.push((self.pi("proj.b"), Matrix::from_vec(1, h, d_zp.col_sums())?));
        let mut d_p = d_zp.matmul_nt(self.value("proj.w"))?;

        // Residual blocks, in reverse.
        let a_dim = self.config.attn_dim;
        for t in (0..self.config.n_residual_blocks).rev() {
            let bc = &cache.blocks[t];
            // d_p is the gradient at the block output: it flows unchanged
            // through the skip connection and through the block body.
            let d_z2 = &d_p;
            grads.push((
                self.pi(&format!("block{t}.fc2.w")),
                bc.a1.matmul_tn(d_z2)?,
            ));
            grads.push((
                self.pi(&format!("block{t}.fc2.b")),
                Matrix::from_vec(1, a_dim, d_z2.col_sums())?,
            ));
            let d_a1 = d_z2.matmul_nt(self.value(&format!("block{t}.fc2.w")))?;
            let d_z1 = relu_backward(&bc.a1, &d_a1)?;
            grads.push((
                self.pi(&format!("block{t}.fc1.w")),
                bc.n.matmul_tn(&d_z1)?,
            ));
            grads.push((
                self.pi(&format!("block{t}.fc1.b")),
                Matrix::from_vec(1, self.config.hidden_dim, d_z1.col_sums())?,
            ));
            let d_n = d_z1.matmul_nt(self.value(&format!("block{t}.fc1.w")))?;
            let gamma = self.value(&format!("block{t}.norm.gamma"));
            let (d_from_ln, d_gamma, d_beta) = layernorm_backward(&bc.ln, &d_n, gamma.row(0))?;
            grads.push((
                self.pi(&format!("block{t}.norm.gamma")),
                Matrix::from_vec(1, a_dim, d_gamma)?,
            ));
            grads.push((
                self.pi(&format!("block{t}.norm.beta")),
                Matrix::from_vec(1, a_dim, d_beta)?,
            ));
            d_p.add_assign(&d_from_ln)?;
        }

        // Pooling stage: per-scene backward in fixed chunks, reduced in
        // chunk order.
        let pool_param_names = self.pool_param_names();
        let pool_indices: Vec<usize> = pool_param_names.iter().map(|n| self.pi(n)).collect();
        let pool_shapes: Vec<(usize, usize)> = pool_indices
            .iter()
            .map(|&i| (self.params[i].value.rows(), self.params[i].value.cols()))
            .collect();
        let d_rows: Vec<&[f64]> = (0..d_p.rows()).map(|r| d_p.row(r)).collect();
        let chunk_grads: Vec<Result<Vec<Matrix>>> = cache
            .scenes
            .par_chunks(SCENE_CHUNK)
            .zip(d_rows.par_chunks(SCENE_CHUNK))
            .map(|(scene_chunk, row_chunk)| {
                let mut local: Vec<Matrix> = pool_shapes
                    .iter()
                    .map(|&(r, c)| Matrix::zeros(r, c))
                    .collect();
                for (sc, d_row) in scene_chunk.iter().zip(row_chunk) {
                    self.scene_backward(sc, d_row, &mut local)?;
                }
                Ok(local)
            })
            .collect();
        let mut pool_grads: Vec<Matrix> = pool_shapes
            .iter()
            .map(|&(r, c)| Matrix::zeros(r, c))
            .collect();
        for chunk in chunk_grads {
            for (total, part) in pool_grads.iter_mut().zip(chunk?) {
                total.add_assign(&part)?;
            }
        }
        for (i, g) in pool_indices.into_iter().zip(pool_grads) {
            grads.push((i, g));
        }

        for (i, g) in grads {
            self.params[i].grad.add_assign(&g)?;
        }
        Ok(())
    }

    /// Parameter names of the pooling stage, in the fixed gradient-reduction
    /// order.
    fn pool_param_names(&self) -> Vec<&'static str> {
        if !self.config.use_attention {
            return vec!["lift.w", "lift.b"];
        }
        match self.config.attention_kind {
            AttentionKind::Cross => vec![
                "attn.queries",
                "attn.key.w",
                "attn.value.w",
                "attn.value.b",
                "attn.out.w",
                "attn.out.b",
            ],
            AttentionKind::SelfAttention => vec![
                "attn.query.w",
                "attn.query.b",
                "attn.key.w",
                "attn.value.w",
                "attn.value.b",
                "attn.out.w",
                "attn.out.b",
            ],
        }
    }

    /// Backward through one scene's pooling, accumulating into `local`
    /// (same order as [`Self::pool_param_names`]).
    fn scene_backward(
        &self,
        cache: &SceneCache,
        d_pooled: &[f64],
        local: &mut [Matrix],
    ) -> Result<()> {
        let a_dim = self.config.attn_dim;
        match cache {
            SceneCache::MeanLift { mean } => {
                let d_row = Matrix::from_vec(1, a_dim, d_pooled.to_vec())?;
                local[0].add_assign(&mean.matmul_tn(&d_row)?)?;
                local[1].add_assign(&d_row)?;
            }
            SceneCache::Cross { x, v, attn, ctx, k } => {
                let n_q = self.config.n_queries;
                let heads = self.config.n_heads;
                let d = a_dim / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let seq = x.rows();
                // Mean pooling over query outputs.
                let inv = 1.0 / n_q as f64;
                let mut d_o = Matrix::zeros(n_q, a_dim);
                for qi in 0..n_q {
                    for (slot, &g) in d_o.row_mut(qi).iter_mut().zip(d_pooled) {
                        *slot = g * inv;
                    }
                }
                // Output projection.
                local[4].add_assign(&ctx.matmul_tn(&d_o)?)?; // attn.out.w
                local[5].add_assign(&Matrix::from_vec(1, a_dim, d_o.col_sums())?)?;
                let d_ctx = d_o.matmul_nt(self.value("attn.out.w"))?;

                let queries = self.value("attn.queries");
                let mut d_queries = Matrix::zeros(n_q, a_dim);
                let mut d_k = Matrix::zeros(seq, a_dim);
                let mut d_v = Matrix::zeros(seq, a_dim);
                for h in 0..heads {
                    let hr = h * d..(h + 1) * d;
                    let weights = &attn[h];
                    // d attention weights.
                    let mut d_attn = Matrix::zeros(n_q, seq);
                    for qi in 0..n_q {
                        let dc = &d_ctx.row(qi)[hr.clone()];
                        let row = d_attn.row_mut(qi);
                        for (l, slot) in row.iter_mut().enumerate() {
                            *slot = dot(dc, &v.row(l)[hr.clone()]);
                        }
                    }
                    // d value rows.
                    for l in 0..seq {
                        let dv = &mut d_v.row_mut(l)[hr.clone()];
                        for qi in 0..n_q {
                            let w = weights.get(qi, l);
                            axpy(dv, w, &d_ctx.row(qi)[hr.clone()]);
                        }
                    }
                    let mut d_scores = masked_softmax_backward(weights, &d_attn)?;
                    d_scores.scale(scale);
                    // d queries and d keys through the scaled dot products.
                    for qi in 0..n_q {
                        let ds = d_scores.row(qi).to_vec();
                        let dq = &mut d_queries.row_mut(qi)[hr.clone()];
                        for (l, &g) in ds.iter().enumerate() {
                            axpy(dq, g, &k.row(l)[hr.clone()]);
                        }
                    }
                    for l in 0..seq {
                        let dk = &mut d_k.row_mut(l)[hr.clone()];
                        for qi in 0..n_q {
                            let g = d_scores.get(qi, l);
                            axpy(dk, g, &queries.row(qi)[hr.clone()]);
                        }
                    }
                }
                local[0].add_assign(&d_queries)?; // attn.queries
                local[1].add_assign(&x.matmul_tn(&d_k)?)?; // attn.key.w
                local[2].add_assign(&x.matmul_tn(&d_v)?)?; // attn.value.w
                local[3].add_assign(&Matrix::from_vec(1, a_dim, d_v.col_sums())?)?;
            }
            SceneCache::SelfAttn {
                x,
                q,
                k,
                v,
                attn,
                ctx,
                mask,
            } => {
                let heads = self.config.n_heads;
                let d = a_dim / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let seq = x.rows();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                // Masked-mean pooling: gradient reaches unmasked rows only.
                let mut d_o = Matrix::zeros(seq, a_dim);
                for (i, &keep) in mask.iter().enumerate() {
                    if keep {
                        for (slot, &g) in d_o.row_mut(i).iter_mut().zip(d_pooled) {
                            *slot = g / count;
                        }
                    }
                }
                local[5].add_assign(&ctx.matmul_tn(&d_o)?)?; // attn.out.w
                local[6].add_assign(&Matrix::from_vec(1, a_dim, d_o.col_sums())?)?;
                let d_ctx = d_o.matmul_nt(self.value("attn.out.w"))?;

                let mut d_q = Matrix::zeros(seq, a_dim);
                let mut d_k = Matrix::zeros(seq, a_dim);
                let mut d_v = Matrix::zeros(seq, a_dim);
                for h in 0..heads {
                    let hr = h * d..(h + 1) * d;
                    let weights = &attn[h];
                    let mut d_attn = Matrix::zeros(seq, seq);
                    for i in 0..seq {
                        let dc = &d_ctx.row(i)[hr.clone()];
                        let row = d_attn.row_mut(i);
                        for (l, slot) in row.iter_mut().enumerate() {
                            *slot = dot(dc, &v.row(l)[hr.clone()]);
                        }
                    }
                    for l in 0..seq {
                        let dv = &mut d_v.row_mut(l)[hr.clone()];
                        for i in 0..seq {
                            let w = weights.get(i, l);
                            axpy(dv, w, &d_ctx.row(i)[hr.clone()]);
                        }
                    }
                    let mut d_scores = masked_softmax_backward(weights, &d_attn)?;
                    d_scores.scale(scale);
                    for i in 0..seq {
                        let ds = d_scores.row(i).to_vec();
                        let dq = &mut d_q.row_mut(i)[hr.clone()];
                        for (l, &g) in ds.iter().enumerate() {
                            axpy(dq, g, &k.row(l)[hr.clone()]);
                        }
                    }
                    for l in 0..seq {
                        let dk = &mut d_k.row_mut(l)[hr.clone()];
                        for i in 0..seq {
                            let g = d_scores.get(i, l);
                            axpy(dk, g, &q.row(i)[hr.clone()]);
                        }
                    }
                }
                local[0].add_assign(&x.matmul_tn(&d_q)?)?; // attn.query.w
                local[1].add_assign(&Matrix::from_vec(1, a_dim, d_q.col_sums())?)?;
                local[2].add_assign(&x.matmul_tn(&d_k)?)?;
                local[3].add_assign(&x.matmul_tn(&d_v)?)?;
                local[4].add_assign(&Matrix::from_vec(1, a_dim, d_v.col_sums())?)?;
            }
        }
        Ok(())
    }
}

/// Threshold a probability vector with the `≥` tie rule.
pub fn threshold_probs(probs: &[f64], threshold: f64) -> LabelVector {
    probs
        .iter()
        .map(|&p| if p >= threshold { 1 } else { 0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{bce_from_logits, grad_check, GradTarget};

    fn tiny_config(kind: AttentionKind, use_attention: bool) -> SurrogateConfig {
        SurrogateConfig {
            embed_dim: 8,
            attn_dim: 8,
            n_heads: 2,
            n_queries: 2,
            hidden_dim: 8,
            n_residual_blocks: 3,
            dropout_p: 0.0,
            n_labels: 4,
            use_attention,
            attention_kind: kind,
            init_seed: 11,
        }
    }

    fn random_scene(rng: &mut crate::rng::Rng, frames: usize, width: usize) -> (Matrix, Vec<bool>) {
        let x = Matrix::from_vec(
            frames,
            width,
            (0..frames * width).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        (x, vec![true; frames])
    }

    struct BatchTarget {
        model: SurrogateModel,
        scenes: Vec<(Matrix, Vec<bool>)>,
        targets: Matrix,
    }

    impl GradTarget for BatchTarget {
        fn params_mut(&mut self) -> &mut [Param] {
            self.model.params_mut()
        }

        fn eval(&mut self, accumulate_grads: bool) -> Result<f64> {
            let views: Vec<SceneView> = self
                .scenes
                .iter()
                .map(|(x, m)| SceneView {
                    embeddings: x,
                    mask: m,
                })
                .collect();
            let (logits, cache) = self.model.frozen_forward(&views)?;
            let (loss, d_logits) = bce_from_logits(&logits, &self.targets)?;
            if accumulate_grads {
                self.model.backward(&cache, &d_logits)?;
            }
            Ok(loss)
        }
    }

    fn grad_check_model(config: SurrogateConfig, seed: u64) -> crate::tensor::GradCheckReport {
        let model = SurrogateModel::init(config).unwrap();
        let mut rng = RngState::new(seed).stream();
        let scenes: Vec<(Matrix, Vec<bool>)> = (0..3)
            .map(|i| {
                let (x, mut mask) = random_scene(&mut rng, 3 + i % 2, 8);
                if i == 1 {
                    // Include a padded frame to exercise masking.
                    mask[2] = false;
                }
                (x, mask)
            })
            .collect();
        let targets = Matrix::from_vec(
            3,
            4,
            (0..12).map(|_| rng.bernoulli(0.5) as u8 as f64).collect(),
        )
        .unwrap();
        let mut target = BatchTarget {
            model,
            scenes,
            targets,
        };
        grad_check(&mut target, &RngState::new(77), 20).unwrap()
    }

    #[test]
    fn full_model_gradient_check_cross() {
        let r = grad_check_model(tiny_config(AttentionKind::Cross, true), 31);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn full_model_gradient_check_self_attention() {
        let r = grad_check_model(tiny_config(AttentionKind::SelfAttention, true), 32);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn full_model_gradient_check_no_attention() {
        let r = grad_check_model(tiny_config(AttentionKind::Cross, false), 33);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn full_model_gradient_check_no_blocks() {
        let cfg = SurrogateConfig {
            n_residual_blocks: 0,
            ..tiny_config(AttentionKind::Cross, true)
        };
        let r = grad_check_model(cfg, 34);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_config(AttentionKind::Cross, true);
        let a = SurrogateModel::init(cfg.clone()).unwrap();
        let b = SurrogateModel::init(cfg.clone()).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value, pb.value, "{}", pa.name);
        }
        let c = SurrogateModel::init(SurrogateConfig {
            init_seed: 12,
            ..cfg
        })
        .unwrap();
        assert!(
            a.params()
                .iter()
                .zip(c.params())
                .any(|(pa, pc)| pa.value != pc.value),
            "different seeds must differ somewhere"
        );
    }

    #[test]
    fn param_count_formula_matches_for_random_configs() {
        let mut rng = RngState::new(1234).stream();
        for case in 0..20 {
            let heads = 1 + rng.below(4) as usize;
            let cfg = SurrogateConfig {
                embed_dim: 1 + rng.below(40) as usize,
                attn_dim: heads * (1 + rng.below(16) as usize),
                n_heads: heads,
                n_queries: 1 + rng.below(6) as usize,
                hidden_dim: 1 + rng.below(48) as usize,
                n_residual_blocks: rng.below(4) as usize,
                dropout_p: 0.1,
                n_labels: 1 + rng.below(80) as usize,
                use_attention: case % 3 != 2,
                attention_kind: if case % 2 == 0 {
                    AttentionKind::Cross
                } else {
                    AttentionKind::SelfAttention
                },
                init_seed: case,
            };
            let model = SurrogateModel::init(cfg.clone()).unwrap();
            assert_eq!(model.param_count(), cfg.param_count(), "case {case}: {cfg:?}");
        }
    }

    #[test]
    fn outputs_are_strict_probabilities() {
        let cfg = tiny_config(AttentionKind::Cross, true);
        let model = SurrogateModel::init(cfg).unwrap();
        let mut rng = RngState::new(5).stream();
        let (x, mask) = random_scene(&mut rng, 5, 8);
        let probs = model.forward(&x, &mask).unwrap();
        assert_eq!(probs.len(), 4);
        for &p in &probs {
            assert!(p > 0.0 && p < 1.0);
        }
        // Thresholding conventions.
        assert_eq!(threshold_probs(&[0.9, 0.1], 0.5), vec![1, 0]);
        assert_eq!(threshold_probs(&[0.5], 0.5), vec![1]);
        assert_eq!(
            model.predict(&x, &mask, 1.0).unwrap(),
            vec![0; 4],
            "probabilities never reach 1.0"
        );
    }

    #[test]
    fn duplicating_the_only_frame_changes_nothing() {
        let cfg = tiny_config(AttentionKind::Cross, true);
        let model = SurrogateModel::init(cfg).unwrap();
        let mut rng = RngState::new(6).stream();
        let frame: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let single = Matrix::from_rows(&[frame.clone()]).unwrap();
        let double = Matrix::from_rows(&[frame.clone(), frame]).unwrap();
        let p1 = model.forward(&single, &[true]).unwrap();
        let p2 = model.forward(&double, &[true, true]).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn permuting_frames_changes_nothing_within_tolerance() {
        for (kind, use_attention) in [
            (AttentionKind::Cross, true),
            (AttentionKind::SelfAttention, true),
            (AttentionKind::Cross, false),
        ] {
            let cfg = tiny_config(kind, use_attention);
            let model = SurrogateModel::init(cfg).unwrap();
            let mut rng = RngState::new(7).stream();
            let (x, _) = random_scene(&mut rng, 5, 8);
            let mask = vec![true, true, true, false, false];
            let perm = [2usize, 0, 1, 4, 3];
            let xp =
                Matrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
                    .unwrap();
            let maskp: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
            let p1 = model.forward(&x, &mask).unwrap();
            let p2 = model.forward(&xp, &maskp).unwrap();
            for (a, b) in p1.iter().zip(&p2) {
                assert!((a - b).abs() < 1e-12, "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn padding_with_masked_frames_changes_nothing() {
        for (kind, use_attention) in [
            (AttentionKind::Cross, true),
            (AttentionKind::SelfAttention, true),
            (AttentionKind::Cross, false),
        ] {
            let cfg = tiny_config(kind, use_attention);
            let model = SurrogateModel::init(cfg).unwrap();
            let mut rng = RngState::new(8).stream();
            let (x, mask) = random_scene(&mut rng, 4, 8);
            let mut padded_rows: Vec<Vec<f64>> = (0..4).map(|i| x.row(i).to_vec()).collect();
            padded_rows.push((0..8).map(|_| rng.normal() * 100.0).collect());
            padded_rows.push(vec![0.0; 8]);
            let xp = Matrix::from_rows(&padded_rows).unwrap();
            let mut maskp = mask.clone();
            maskp.extend([false, false]);
            let p1 = model.forward(&x, &mask).unwrap();
            let p2 = model.forward(&xp, &maskp).unwrap();
            for (a, b) in p1.iter().zip(&p2) {
                assert!((a - b).abs() < 1e-12, "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny_config(AttentionKind::Cross, true);
        let model = SurrogateModel::init(cfg).unwrap();
        let x = Matrix::zeros(3, 5); // wrong width
        assert!(matches!(
            model.forward(&x, &[true, true, true]),
            Err(Error::Shape(_))
        ));
        let x = Matrix::zeros(3, 8);
        assert!(matches!(
            model.forward(&x, &[false, false, false]),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn batch_and_single_forward_agree() {
        // Batched evaluation must give each scene exactly the result it
        // gets alone: padding and batching are pure bookkeeping.
        let cfg = tiny_config(AttentionKind::Cross, true);
        let model = SurrogateModel::init(cfg).unwrap();
        let mut rng = RngState::new(9).stream();
        let scenes: Vec<(Matrix, Vec<bool>)> =
            (0..5).map(|i| random_scene(&mut rng, 3 + i % 3, 8)).collect();
        let views: Vec<SceneView> = scenes
            .iter()
            .map(|(x, m)| SceneView {
                embeddings: x,
                mask: m,
            })
            .collect();
        let batch = model.forward_batch(&views).unwrap();
        for (i, (x, m)) in scenes.iter().enumerate() {
            let single = model.forward(x, m).unwrap();
            assert_eq!(batch.row(i), single.as_slice(), "scene {i}");
        }
    }
}
