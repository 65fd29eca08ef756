//! Training: Adam with decoupled weight decay for the surrogate, full-batch
//! gradient descent for the logistic-regression baseline, and evaluation
//! glue between models and the metrics module.
//!
//! Everything here is deterministic on a fixed platform: batches come from
//! a seeded shuffle, dropout streams are derived per (epoch, batch), and
//! gradient reduction inside the model happens in a fixed order regardless
//! of worker threads.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::SceneRecord;
use crate::digest::{hex64, Fnv1a64};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{
    checkpoint_bytes, LabelVector, SceneView, SurrogateConfig, SurrogateModel,
};
use crate::rng::RngState;
use crate::taxonomy::Taxonomy;
use crate::tensor::{bce_from_logits, masked_mean_rows, sigmoid, Matrix, Param};

/// Which labels a training or evaluation run consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Truth,
    Teacher,
}

/// Default ridge strength for the logistic-regression baseline.
pub const LOGREG_DEFAULT_L2: f64 = 1e-3;

/// Hyperparameters for the surrogate training loop (and the label source
/// shared with the baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Mini-batch size; at least 2 because batch normalisation needs batch
    /// statistics. A trailing batch of 1 is merged into its predecessor.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay, applied only to decay-flagged parameters.
    pub weight_decay: f64,
    /// Consecutive epochs without a validation macro-F1 improvement before
    /// training stops. 0 stops after the first epoch that fails to improve.
    pub early_stop_patience: usize,
    pub label_source: LabelSource,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            early_stop_patience: 8,
            label_source: LabelSource::Teacher,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} < 2 (batch normalisation needs batch statistics)",
                self.batch_size
            )));
        }
        // With epochs = 0 no loop runs, so patience is not consulted.
        if self.epochs > 0 && self.early_stop_patience > self.epochs {
            return Err(Error::Config(format!(
                "early_stop_patience {} exceeds epochs {}",
                self.early_stop_patience, self.epochs
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} {beta} outside [0, 1)")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon {} must be positive and finite",
                self.epsilon
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay {} must be non-negative and finite",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Stable digest over the serialised config.
    pub fn digest_hex(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        crate::digest::fnv1a64_hex(&bytes)
    }
}

/// Adam with decoupled weight decay. Moment buffers are indexed in
/// parameter order, so the same optimizer must be reused against the same
/// parameter list for its whole lifetime.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &[Param]) -> AdamW {
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    /// One update from the gradients currently stored on `params`.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            if m.rows() != p.value.rows() || m.cols() != p.value.cols() {
                return Err(Error::Shape(format!(
                    "parameter {} changed shape under the optimizer",
                    p.name
                )));
            }
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            for ((w, &g), (m, v)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * *w);
            }
        }
        Ok(())
    }
}

/// One epoch's summary line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub wall_time_s: f64,
}

/// The training run's record: per-epoch statistics, the winning epoch, and
/// the digest of the best checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Index into `epochs` of the best validation macro-F1 (earliest on
    /// ties); `None` when zero epochs ran.
    pub best_epoch: Option<usize>,
    pub checkpoint_digest: String,
    pub stopped_early: bool,
    pub label_source: LabelSource,
}

impl TrainReport {
    /// Digest over everything except wall times, for bitwise determinism
    /// comparisons across runs and thread counts.
    pub fn determinism_digest(&self) -> String {
        let mut d = Fnv1a64::new();
        for e in &self.epochs {
            d.update(&(e.epoch as u64).to_le_bytes());
            d.update(&e.train_loss.to_bits().to_le_bytes());
            d.update(&e.val_macro_f1.to_bits().to_le_bytes());
        }
        d.update(&match self.best_epoch {
            Some(e) => (e as u64 + 1).to_le_bytes(),
            None => 0u64.to_le_bytes(),
        });
        d.update(self.checkpoint_digest.as_bytes());
        d.update(&[self.stopped_early as u8]);
        d.update(match self.label_source {
            LabelSource::Truth => b"truth",
            LabelSource::Teacher => b"teacher",
        });
        hex64(d.finish())
    }
}

/// Contiguous batch index ranges over `n` examples: chunks of
/// `batch_size`, with a trailing singleton merged into its predecessor so
/// batch statistics always see at least two rows.
fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut ranges: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        ranges.push(start..end);
        start = end;
    }
    if ranges.len() >= 2 && ranges.last().map(|r| r.len()) == Some(1) {
        let last = ranges.pop().expect("non-empty");
        ranges.last_mut().expect("non-empty").end = last.end;
    }
    ranges
}

/// Pad a batch of scenes to the longest sequence with masked-out zero
/// frames, per the training batch contract. Returns owned matrices/masks;
/// build [`SceneView`]s over them.
pub fn padded_batch(records: &[&SceneRecord]) -> (Vec<Matrix>, Vec<Vec<bool>>) {
    let max_len = records
        .iter()
        .map(|r| r.embeddings.rows())
        .max()
        .unwrap_or(0);
    let mut mats = Vec::with_capacity(records.len());
    let mut masks = Vec::with_capacity(records.len());
    for r in records {
        let rows = r.embeddings.rows();
        let mut mask = r.mask.clone();
        if rows == max_len {
            mats.push(r.embeddings.clone());
        } else {
            let mut padded = Matrix::zeros(max_len, r.embeddings.cols());
            padded.data_mut()[..rows * r.embeddings.cols()].copy_from_slice(r.embeddings.data());
            mats.push(padded);
            mask.resize(max_len, false);
        }
        masks.push(mask);
    }
    (mats, masks)
}

fn target_matrix(records: &[&SceneRecord], source: LabelSource) -> Result<Matrix> {
    let n_labels = records
        .first()
        .map(|r| r.y_true.len())
        .ok_or_else(|| Error::Validation("empty batch".into()))?;
    let mut t = Matrix::zeros(records.len(), n_labels);
    for (i, r) in records.iter().enumerate() {
        for (cell, &bit) in t.row_mut(i).iter_mut().zip(r.labels(source)?) {
            *cell = bit as f64;
        }
    }
    Ok(t)
}

fn check_records(
    scenes: &[SceneRecord],
    cfg: &SurrogateConfig,
    source: LabelSource,
    what: &str,
) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Validation(format!("{what} dataset is empty")));
    }
    for (i, r) in scenes.iter().enumerate() {
        r.validate(cfg.embed_dim, cfg.n_labels)
            .map_err(|e| Error::Validation(format!("{what} scene {i}: {e}")))?;
        r.labels(source)
            .map_err(|e| Error::Validation(format!("{what} scene {i}: {e}")))?;
    }
    Ok(())
}

/// Validation macro-F1 over labels at threshold 0.5, eval-mode inference.
/// A wholly undefined table (no positives anywhere, none predicted) scores
/// 0 rather than erroring, so degenerate early epochs survive.
fn validation_macro_f1(
    model: &SurrogateModel,
    val: &[SceneRecord],
    source: LabelSource,
) -> Result<f64> {
    let views: Vec<SceneView> = val
        .iter()
        .map(|r| SceneView {
            embeddings: &r.embeddings,
            mask: &r.mask,
        })
        .collect();
    let preds = model.predict_batch(&views, 0.5)?;
    let refs: Vec<LabelVector> = val
        .iter()
        .map(|r| r.labels(source).map(Clone::clone))
        .collect::<Result<_>>()?;
    let counts = metrics::confusion(&preds, &refs)?;
    let rows = metrics::prf(&counts);
    Ok(metrics::macro_average(&rows).map_or(0.0, |m| m.f1))
}

/// Distillation driver: mini-batch AdamW on mean binary cross-entropy
/// against the configured label source, seeded shuffles, early stopping on
/// validation macro-F1, best-epoch checkpointing (batch-norm running
/// statistics are frozen at the best epoch's values).
pub fn train_surrogate(
    train: &[SceneRecord],
    val: &[SceneRecord],
    model_cfg: &SurrogateConfig,
    tcfg: &TrainConfig,
) -> Result<(SurrogateModel, TrainReport)> {
    tcfg.validate()?;
    check_records(train, model_cfg, tcfg.label_source, "train")?;
    check_records(val, model_cfg, tcfg.label_source, "validation")?;
    if tcfg.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds training set size {}",
            tcfg.batch_size,
            train.len()
        )));
    }

    let mut model = SurrogateModel::init(model_cfg.clone())?;
    let mut opt = AdamW::new(tcfg, model.params());
    let root = RngState::new(tcfg.shuffle_seed);
    let ranges = batch_ranges(train.len(), tcfg.batch_size);

    // (epoch, val macro-F1, train loss, snapshot)
    let mut best: Option<(usize, f64, f64, SurrogateModel)> = None;
    let mut stats: Vec<EpochStats> = Vec::with_capacity(tcfg.epochs);
    let mut stall = 0usize;
    let mut stopped_early = false;

    for epoch in 0..tcfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.child("shuffle", epoch as u64).stream().shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (batch, range) in ranges.iter().enumerate() {
            let records: Vec<&SceneRecord> =
                order[range.clone()].iter().map(|&i| &train[i]).collect();
            let (mats, masks) = padded_batch(&records);
            let views: Vec<SceneView> = mats
                .iter()
                .zip(&masks)
                .map(|(m, k)| SceneView {
                    embeddings: m,
                    mask: k,
                })
                .collect();
            let targets = target_matrix(&records, tcfg.label_source)?;

            let dropout = root.child("epoch", epoch as u64).child("dropout", batch as u64);
            let (logits, cache) = model.train_forward(&views, &dropout)?;
            let (loss, d_logits) = bce_from_logits(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    detail: format!("training loss is {loss}"),
                });
            }
            loss_sum += loss * records.len() as f64;

            model.zero_grads();
            model.backward(&cache, &d_logits)?;
            opt.step(model.params_mut())?;
        }
        let train_loss = loss_sum / train.len() as f64;

        let val_macro_f1 = validation_macro_f1(&model, val, tcfg.label_source)?;
        let improved = best
            .as_ref()
            .is_none_or(|(_, f1, _, _)| val_macro_f1 > *f1);
        // A tie on the score still moves the checkpoint to the epoch with
        // the lower training loss, but does not reset patience.
        let tied_lower_loss = best
            .as_ref()
            .is_some_and(|(_, f1, loss, _)| val_macro_f1 == *f1 && train_loss < *loss);
        if improved || tied_lower_loss {
            best = Some((epoch, val_macro_f1, train_loss, model.clone()));
        }
        if improved {
            stall = 0;
        } else {
            stall += 1;
        }

        let wall_time_s = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6} val_macro_f1 {val_macro_f1:.4} ({wall_time_s:.2}s)"
        );
        stats.push(EpochStats {
            epoch,
            train_loss,
            val_macro_f1,
            wall_time_s,
        });

        if stall > 0 && stall >= tcfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_model) = match best {
        Some((e, _, _, m)) => (Some(e), m),
        // Zero epochs: the initialized model is the checkpoint.
        None => (None, model),
    };
    let checkpoint_digest = crate::digest::fnv1a64_hex(&checkpoint_bytes(&best_model)?);
    Ok((
        best_model,
        TrainReport {
            epochs: stats,
            best_epoch,
            checkpoint_digest,
            stopped_early,
            label_source: tcfg.label_source,
        },
    ))
}

/// ℓ2-regularised logistic regression over masked-mean-pooled embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    /// n_labels × embed_dim.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub l2_strength: f64,
}

impl LogRegModel {
    pub fn n_labels(&self) -> usize {
        self.weight.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Per-label probabilities for a batch of pooled feature rows.
    pub fn probs(&self, features: &Matrix) -> Result<Matrix> {
        let mut logits = features.matmul_nt(&self.weight)?;
        crate::tensor::add_row_bias(&mut logits, &self.bias)?;
        Ok(sigmoid(&logits))
    }

    /// One-line JSON document (decimal floats round-trip f64 exactly).
    pub fn to_json(&self) -> String {
        let repr = LogRegRepr {
            format_version: LOGREG_FORMAT_VERSION,
            weight: (0..self.weight.rows())
                .map(|r| self.weight.row(r).to_vec())
                .collect(),
            bias: self.bias.clone(),
            l2_strength: self.l2_strength,
        };
        serde_json::to_string(&repr).expect("logreg model serialises")
    }

    pub fn from_json(text: &str) -> Result<LogRegModel> {
        let repr: LogRegRepr = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("logreg model: {e}")))?;
        if repr.format_version != LOGREG_FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "logreg model format version {}, supported {LOGREG_FORMAT_VERSION}",
                repr.format_version
            )));
        }
        let rows = repr.weight.len();
        let cols = repr.weight.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(Error::Validation("logreg model has an empty weight".into()));
        }
        if repr.weight.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("logreg weight rows have uneven lengths".into()));
        }
        if repr.bias.len() != rows {
            return Err(Error::Validation(format!(
                "logreg has {} bias entries for {rows} labels",
                repr.bias.len()
            )));
        }
        let mut weight = Matrix::zeros(rows, cols);
        for (r, row) in repr.weight.iter().enumerate() {
            weight.row_mut(r).copy_from_slice(row);
        }
        Ok(LogRegModel {
            weight,
            bias: repr.bias,
            l2_strength: repr.l2_strength,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &std::path::Path) -> Result<LogRegModel> {
        LogRegModel::from_json(&std::fs::read_to_string(path)?)
    }
}

pub const LOGREG_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogRegRepr {
    format_version: u32,
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    l2_strength: f64,
}

/// Masked-mean feature rows for a set of scenes.
pub fn pooled_features(scenes: &[SceneView]) -> Result<Matrix> {
    let embed_dim = scenes
        .first()
        .map(|s| s.embeddings.cols())
        .ok_or_else(|| Error::Validation("no scenes to pool".into()))?;
    let mut x = Matrix::zeros(scenes.len(), embed_dim);
    for (i, s) in scenes.iter().enumerate() {
        let mean = masked_mean_rows(s.embeddings, s.mask)?;
        x.row_mut(i).copy_from_slice(&mean);
    }
    Ok(x)
}

fn logreg_objective(
    x: &Matrix,
    y: &Matrix,
    w: &Matrix,
    b: &[f64],
    l2: f64,
) -> Result<(f64, Matrix)> {
    let mut logits = x.matmul_nt(w)?;
    crate::tensor::add_row_bias(&mut logits, b)?;
    let (bce, d_logits) = bce_from_logits(&logits, y)?;
    Ok((bce + 0.5 * l2 * w.sq_sum(), d_logits))
}

/// Train the baseline with the default ridge strength.
pub fn train_logreg(train: &[SceneRecord], tcfg: &TrainConfig) -> Result<LogRegModel> {
    train_logreg_with(train, tcfg, LOGREG_DEFAULT_L2)
}

/// Full-batch gradient descent with Armijo backtracking on
/// BCE + (l2/2)·‖W‖²; stops when the gradient norm drops below 1e-6 or
/// after 5000 iterations. Convex, deterministic, seed-free.
pub fn train_logreg_with(
    train: &[SceneRecord],
    tcfg: &TrainConfig,
    l2_strength: f64,
) -> Result<LogRegModel> {
    if train.is_empty() {
        return Err(Error::Validation("train dataset is empty".into()));
    }
    if !(l2_strength.is_finite() && l2_strength >= 0.0) {
        return Err(Error::Config(format!(
            "l2_strength {l2_strength} must be non-negative and finite"
        )));
    }
    let embed_dim = train[0].embeddings.cols();
    let n_labels = train[0].y_true.len();
    for (i, r) in train.iter().enumerate() {
        r.validate(embed_dim, n_labels)
            .map_err(|e| Error::Validation(format!("train scene {i}: {e}")))?;
        r.labels(tcfg.label_source)
            .map_err(|e| Error::Validation(format!("train scene {i}: {e}")))?;
    }

    let views: Vec<SceneView> = train
        .iter()
        .map(|r| SceneView {
            embeddings: &r.embeddings,
            mask: &r.mask,
        })
        .collect();
    let x = pooled_features(&views)?;
    let refs: Vec<&SceneRecord> = train.iter().collect();
    let y = target_matrix(&refs, tcfg.label_source)?;

    let mut w = Matrix::zeros(n_labels, embed_dim);
    // Bias starts at the prevalence logit — the exact optimum of the
    // weight-free problem — so badly conditioned runs (strong ridge, rare
    // labels) do not spend their iteration budget crawling the intercepts.
    let n = train.len() as f64;
    let mut b: Vec<f64> = y
        .col_sums()
        .iter()
        .map(|&pos| {
            let pi = (pos / n).clamp(0.5 / n, 1.0 - 0.5 / n);
            (pi / (1.0 - pi)).ln()
        })
        .collect();
    let (mut loss, mut d_logits) = logreg_objective(&x, &y, &w, &b, l2_strength)?;
    let mut step: f64 = 1.0;

    for iter in 0..5000 {
        // ∇W = d_logitsᵀ·X + l2·W; ∇b = column sums of d_logits.
        let mut gw = d_logits.matmul_tn(&x)?;
        gw.add_scaled(&w, l2_strength)?;
        let gb = d_logits.col_sums();
        let g_sq = gw.sq_sum() + gb.iter().map(|v| v * v).sum::<f64>();
        if g_sq.sqrt() < 1e-6 {
            break;
        }

        // Armijo backtracking from twice the last accepted step.
        step = (step * 2.0).min(1e8);
        let mut accepted = false;
        for _ in 0..80 {
            let mut w_next = w.clone();
            w_next.add_scaled(&gw, -step)?;
            let b_next: Vec<f64> = b.iter().zip(&gb).map(|(&bi, &gi)| bi - step * gi).collect();
            let (loss_next, d_next) = logreg_objective(&x, &y, &w_next, &b_next, l2_strength)?;
            if loss_next.is_finite() && loss_next <= loss - 1e-4 * step * g_sq {
                w = w_next;
                b = b_next;
                loss = loss_next;
                d_logits = d_next;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::Divergence {
                epoch: iter,
                batch: 0,
                detail: "baseline line search could not find a descending step".into(),
            });
        }
    }

    Ok(LogRegModel {
        weight: w,
        bias: b,
        l2_strength,
    })
}

/// Anything that can turn scenes into hard label predictions.
pub trait Classifier {
    fn predict_batch(&self, scenes: &[SceneView], threshold: f64) -> Result<Vec<LabelVector>>;
    fn n_parameters(&self) -> usize;
}

impl Classifier for SurrogateModel {
    fn predict_batch(&self, scenes: &[SceneView], threshold: f64) -> Result<Vec<LabelVector>> {
        let probs = self.forward_batch(scenes)?;
        Ok((0..probs.rows())
            .map(|i| crate::model::threshold_probs(probs.row(i), threshold))
            .collect())
    }

    fn n_parameters(&self) -> usize {
        self.param_count()
    }
}

impl Classifier for LogRegModel {
    fn predict_batch(&self, scenes: &[SceneView], threshold: f64) -> Result<Vec<LabelVector>> {
        let probs = self.probs(&pooled_features(scenes)?)?;
        Ok((0..probs.rows())
            .map(|i| crate::model::threshold_probs(probs.row(i), threshold))
            .collect())
    }

    fn n_parameters(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Eval-mode inference + thresholding + the metrics module, recording
/// which reference labels the report was computed against.
pub fn evaluate<C: Classifier + ?Sized>(
    model: &C,
    scenes: &[SceneRecord],
    taxonomy: &Taxonomy,
    against: LabelSource,
    threshold: f64,
) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::Validation("no scenes to evaluate".into()));
    }
    let views: Vec<SceneView> = scenes
        .iter()
        .map(|r| SceneView {
            embeddings: &r.embeddings,
            mask: &r.mask,
        })
        .collect();
    let preds = model.predict_batch(&views, threshold)?;
    let refs: Vec<LabelVector> = scenes
        .iter()
        .map(|r| r.labels(against).map(Clone::clone))
        .collect::<Result<_>>()?;
    MetricsReport::compute(&preds, &refs, taxonomy, against)
}

/// Convenience: per-group F1 map of an evaluation, keyed for reporting.
pub fn group_f1_map(report: &MetricsReport) -> BTreeMap<String, f64> {
    report
        .per_group
        .iter()
        .map(|g| (g.group.numeral().to_string(), g.prf.f1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};

    fn toy_taxonomy() -> Taxonomy {
        Taxonomy::from_toml_str(
            r#"
format_version = 1
default_profile = "toy"

[[category]]
id = "D"
group = "II"
letter = "D"
description = "Rear end"
count = 2

[[category]]
id = "G"
group = "III"
letter = "G"
description = "Crossing paths"
count = 2

[[profile]]
name = "toy"
groups = ["II", "III"]
exclude = []
"#,
        )
        .unwrap()
    }

    fn toy_generator(n_scenes: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_scenes,
            embed_dim: 16,
            seq_len_min: 3,
            seq_len_max: 5,
            prevalence: vec![0.45, 0.3, 0.35, 0.25],
            signal_strength: 3.0,
            noise_std: 0.1,
            nuisance_std: 0.0,
            frame_visibility: 1.0,
            seed,
        }
    }

    fn toy_scenes(n: usize, seed: u64) -> Vec<SceneRecord> {
        generate(&toy_generator(n, seed), &toy_taxonomy()).unwrap()
    }

    fn toy_model_cfg() -> SurrogateConfig {
        SurrogateConfig {
            embed_dim: 16,
            attn_dim: 16,
            n_heads: 2,
            n_queries: 2,
            hidden_dim: 32,
            n_residual_blocks: 1,
            dropout_p: 0.0,
            n_labels: 4,
            init_seed: 7,
            ..SurrogateConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            epochs: 5,
            early_stop_patience: 6,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        // epochs = 0 skips the patience bound: nothing runs.
        let zero = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(zero.validate().is_ok());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn adamw_single_step_hand_values() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut params = vec![Param::new("w", Matrix::filled(1, 1, 1.0), true)];
        params[0].grad.fill(1.0);
        let mut opt = AdamW::new(&cfg, &params);
        opt.step(&mut params).unwrap();
        // m̂ = v̂ = 1 after one step, so the update is lr·1/(1+ε).
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((params[0].value.get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_only_touches_flagged_params() {
        let cfg = TrainConfig {
            learning_rate: 0.5,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut params = vec![
            Param::new("w", Matrix::filled(1, 1, 2.0), true),
            Param::new("b", Matrix::filled(1, 1, 2.0), false),
        ];
        let mut opt = AdamW::new(&cfg, &params);
        opt.step(&mut params).unwrap();
        // Zero gradients: only the decoupled decay term moves anything.
        assert!((params[0].value.get(0, 0) - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-12);
        assert_eq!(params[1].value.get(0, 0), 2.0);
    }

    #[test]
    fn batch_ranges_merge_trailing_singleton() {
        assert_eq!(batch_ranges(8, 4), vec![0..4, 4..8]);
        assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
        assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(batch_ranges(3, 4), vec![0..3]);
        assert_eq!(batch_ranges(0, 4), Vec::<std::ops::Range<usize>>::new());
    }

    #[test]
    fn memorizes_separable_toy_and_loss_decreases() {
        let scenes = toy_scenes(32, 11);
        let tcfg = TrainConfig {
            epochs: 60,
            batch_size: 8,
            learning_rate: 3e-3,
            early_stop_patience: 60,
            label_source: LabelSource::Truth,
            shuffle_seed: 5,
            ..TrainConfig::default()
        };
        let (model, report) = train_surrogate(&scenes, &scenes, &toy_model_cfg(), &tcfg).unwrap();
        let best = report.best_epoch.unwrap();
        assert!(
            report.epochs[best].train_loss < 0.05,
            "best-epoch loss {}",
            report.epochs[best].train_loss
        );
        assert!(
            report.epochs[9].train_loss < report.epochs[0].train_loss,
            "loss did not decrease: {} vs {}",
            report.epochs[9].train_loss,
            report.epochs[0].train_loss
        );
        // Best epoch holds the maximum validation score.
        let best_f1 = report.epochs[best].val_macro_f1;
        assert!(report.epochs.iter().all(|e| e.val_macro_f1 <= best_f1));

        // Self-consistency: evaluating against what it memorised is perfect.
        let report = evaluate(&model, &scenes, &toy_taxonomy(), LabelSource::Truth, 0.5).unwrap();
        assert_eq!(report.macro_group.f1, 1.0);
        assert_eq!(report.exact_match_rate, 1.0);
    }

    #[test]
    fn zero_epochs_returns_initialized_checkpoint() {
        let scenes = toy_scenes(8, 3);
        let tcfg = TrainConfig {
            epochs: 0,
            batch_size: 4,
            label_source: LabelSource::Truth,
            ..TrainConfig::default()
        };
        let (model, report) = train_surrogate(&scenes, &scenes, &toy_model_cfg(), &tcfg).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(report.best_epoch, None);
        let fresh = SurrogateModel::init(toy_model_cfg()).unwrap();
        assert_eq!(
            crate::digest::fnv1a64_hex(&checkpoint_bytes(&model).unwrap()),
            crate::digest::fnv1a64_hex(&checkpoint_bytes(&fresh).unwrap()),
        );
        assert_eq!(report.checkpoint_digest.len(), 16);
    }

    #[test]
    fn training_is_deterministic_and_seed_sensitive() {
        let scenes = toy_scenes(16, 21);
        let mut cfg = toy_model_cfg();
        cfg.dropout_p = 0.1; // exercise the dropout stream derivation
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            early_stop_patience: 3,
            label_source: LabelSource::Truth,
            shuffle_seed: 1,
            ..TrainConfig::default()
        };
        let (_, r1) = train_surrogate(&scenes[..12], &scenes[12..], &cfg, &tcfg).unwrap();
        let (_, r2) = train_surrogate(&scenes[..12], &scenes[12..], &cfg, &tcfg).unwrap();
        assert_eq!(r1.determinism_digest(), r2.determinism_digest());
        assert_eq!(r1.checkpoint_digest, r2.checkpoint_digest);

        let other = TrainConfig {
            shuffle_seed: 2,
            ..tcfg
        };
        let (_, r3) = train_surrogate(&scenes[..12], &scenes[12..], &cfg, &other).unwrap();
        assert_ne!(r1.determinism_digest(), r3.determinism_digest());
    }

    #[test]
    fn non_finite_loss_reports_epoch_and_batch() {
        let mut scenes = toy_scenes(8, 9);
        scenes[5].embeddings.set(0, 0, f64::NAN);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            early_stop_patience: 2,
            label_source: LabelSource::Truth,
            ..TrainConfig::default()
        };
        let err = train_surrogate(&scenes, &scenes, &toy_model_cfg(), &tcfg).unwrap_err();
        match err {
            Error::Divergence { epoch, batch, .. } => {
                assert_eq!(epoch, 0);
                assert!(batch < 2);
            }
            other => panic!("expected divergence, got {other}"),
        }
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn batch_size_larger_than_train_set_is_a_config_error() {
        let scenes = toy_scenes(8, 13);
        let tcfg = TrainConfig {
            batch_size: 9,
            label_source: LabelSource::Truth,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_surrogate(&scenes, &scenes, &toy_model_cfg(), &tcfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn teacher_source_requires_teacher_labels() {
        let scenes = toy_scenes(8, 13);
        let tcfg = TrainConfig {
            batch_size: 4,
            label_source: LabelSource::Teacher,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_surrogate(&scenes, &scenes, &toy_model_cfg(), &tcfg),
            Err(Error::Validation(_))
        ));
    }

    /// Hand-built linearly separable scenes: label j fires exactly when
    /// mean feature j is positive.
    fn separable_records(n: usize, seed: u64) -> Vec<SceneRecord> {
        let mut rng = RngState::new(seed).stream();
        (0..n)
            .map(|i| {
                let bits: Vec<u8> = (0..2).map(|_| rng.bernoulli(0.5) as u8).collect();
                let mut row = vec![0.0; 4];
                row[0] = if bits[0] == 1 { 1.0 } else { -1.0 };
                row[1] = if bits[1] == 1 { 1.0 } else { -1.0 };
                row[2] = rng.normal() * 0.05;
                row[3] = rng.normal() * 0.05;
                SceneRecord {
                    scene_id: format!("toy-{i:03}"),
                    embeddings: Matrix::from_vec(1, 4, row).unwrap(),
                    mask: vec![true],
                    y_true: bits,
                    y_teacher: None,
                }
            })
            .collect()
    }

    #[test]
    fn logreg_separates_toy_set_perfectly() {
        let scenes = separable_records(40, 2);
        let tcfg = TrainConfig {
            label_source: LabelSource::Truth,
            ..TrainConfig::default()
        };
        let model = train_logreg(&scenes, &tcfg).unwrap();
        let views: Vec<SceneView> = scenes
            .iter()
            .map(|r| SceneView {
                embeddings: &r.embeddings,
                mask: &r.mask,
            })
            .collect();
        let preds = model.predict_batch(&views, 0.5).unwrap();
        let refs: Vec<LabelVector> = scenes.iter().map(|r| r.y_true.clone()).collect();
        assert_eq!(metrics::agreement_rate(&preds, &refs).unwrap(), 1.0);
        assert_eq!(model.n_parameters(), 2 * 4 + 2);
    }

    #[test]
    fn logreg_json_round_trips_bitwise() {
        let scenes = separable_records(40, 6);
        let tcfg = TrainConfig {
            label_source: LabelSource::Truth,
            ..TrainConfig::default()
        };
        let model = train_logreg(&scenes, &tcfg).unwrap();
        let back = LogRegModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);

        assert!(matches!(
            LogRegModel::from_json("{}"),
            Err(Error::Parse(_))
        ));
        let truncated = serde_json::json!({
            "format_version": LOGREG_FORMAT_VERSION,
            "weight": [[1.0, 2.0], [3.0]],
            "bias": [0.0, 0.0],
            "l2_strength": 0.001,
        });
        assert!(matches!(
            LogRegModel::from_json(&truncated.to_string()),
            Err(Error::Validation(_))
        ));
        let future = serde_json::json!({
            "format_version": LOGREG_FORMAT_VERSION + 1,
            "weight": [[1.0]],
            "bias": [0.0],
            "l2_strength": 0.001,
        });
        assert!(matches!(
            LogRegModel::from_json(&future.to_string()),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn logreg_optimum_is_seed_independent() {
        let scenes = separable_records(30, 4);
        let a = TrainConfig {
            label_source: LabelSource::Truth,
            shuffle_seed: 1,
            ..TrainConfig::default()
        };
        let b = TrainConfig {
            shuffle_seed: 999,
            ..a.clone()
        };
        let ma = train_logreg(&scenes, &a).unwrap();
        let mb = train_logreg(&scenes, &b).unwrap();
        assert!(ma.weight.max_abs_diff(&mb.weight).unwrap() < 1e-4);
        let views: Vec<SceneView> = scenes
            .iter()
            .map(|r| SceneView {
                embeddings: &r.embeddings,
                mask: &r.mask,
            })
            .collect();
        let x = pooled_features(&views).unwrap();
        let refs: Vec<&SceneRecord> = scenes.iter().collect();
        let y = target_matrix(&refs, LabelSource::Truth).unwrap();
        let la = logreg_objective(&x, &y, &ma.weight, &ma.bias, ma.l2_strength)
            .unwrap()
            .0;
        let lb = logreg_objective(&x, &y, &mb.weight, &mb.bias, mb.l2_strength)
            .unwrap()
            .0;
        assert!((la - lb).abs() < 1e-6);
    }

    #[test]
    fn extreme_ridge_collapses_weights_to_prevalence_logits() {
        let scenes = separable_records(64, 6);
        let tcfg = TrainConfig {
            label_source: LabelSource::Truth,
            ..TrainConfig::default()
        };
        let model = train_logreg_with(&scenes, &tcfg, 1e6).unwrap();
        assert!(model.weight.sq_sum().sqrt() < 1e-3);
        for j in 0..2 {
            let prevalence = scenes.iter().filter(|s| s.y_true[j] == 1).count() as f64
                / scenes.len() as f64;
            let p = 1.0 / (1.0 + (-model.bias[j]).exp());
            assert!(
                (p - prevalence).abs() < 0.02,
                "label {j}: {p} vs prevalence {prevalence}"
            );
        }
    }

    #[test]
    fn evaluate_empty_or_missing_references_fail() {
        let scenes = separable_records(10, 8);
        let tcfg = TrainConfig {
            label_source: LabelSource::Truth,
            ..TrainConfig::default()
        };
        let model = train_logreg(&scenes, &tcfg).unwrap();
        let tax = toy_taxonomy();
        assert!(matches!(
            evaluate(&model, &[], &tax, LabelSource::Truth, 0.5),
            Err(Error::Validation(_))
        ));
        // No teacher labels on these records.
        assert!(matches!(
            evaluate(&model, &scenes, &tax, LabelSource::Teacher, 0.5),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn padded_and_unpadded_eval_probabilities_agree() {
        let scenes = toy_scenes(6, 17);
        let model = SurrogateModel::init(toy_model_cfg()).unwrap();
        let refs: Vec<&SceneRecord> = scenes.iter().collect();
        let (mats, masks) = padded_batch(&refs);
        let padded_views: Vec<SceneView> = mats
            .iter()
            .zip(&masks)
            .map(|(m, k)| SceneView {
                embeddings: m,
                mask: k,
            })
            .collect();
        let padded = model.forward_batch(&padded_views).unwrap();
        assert!(masks.iter().all(|m| m.len() == masks[0].len()));
        for (i, r) in scenes.iter().enumerate() {
            let single = model.forward(&r.embeddings, &r.mask).unwrap();
            for (a, b) in padded.row(i).iter().zip(&single) {
                assert!((a - b).abs() < 1e-10, "scene {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn report_digest_ignores_wall_time() {
        let stats = |wall: f64| TrainReport {
            epochs: vec![EpochStats {
                epoch: 0,
                train_loss: 0.5,
                val_macro_f1: 0.25,
                wall_time_s: wall,
            }],
            best_epoch: Some(0),
            checkpoint_digest: "00112233aabbccdd".into(),
            stopped_early: false,
            label_source: LabelSource::Teacher,
        };
        assert_eq!(
            stats(1.0).determinism_digest(),
            stats(9.0).determinism_digest()
        );
        let mut other = stats(1.0);
        other.epochs[0].train_loss = 0.75;
        assert_ne!(stats(1.0).determinism_digest(), other.determinism_digest());
    }

    #[test]
    fn early_stopping_halts_on_stalled_validation() {
        // Pure noise: validation F1 cannot improve for long.
        let mut gen = toy_generator(24, 31);
        gen.signal_strength = 0.0;
        let scenes = generate(&gen, &toy_taxonomy()).unwrap();
        let tcfg = TrainConfig {
            epochs: 40,
            batch_size: 8,
            early_stop_patience: 3,
            label_source: LabelSource::Truth,
            ..TrainConfig::default()
        };
        let (_, report) = train_surrogate(&scenes, &scenes, &toy_model_cfg(), &tcfg).unwrap();
        if report.stopped_early {
            assert!(report.epochs.len() < 40);
            let best = report.best_epoch.unwrap();
            assert_eq!(report.epochs.len(), best + 1 + 3);
        }
    }
}
