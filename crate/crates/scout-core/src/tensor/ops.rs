//! Forward and backward rules for the layers the surrogate uses.
//!
//! Every backward rule here is hand-derived; all of them are covered by
//! the finite-difference checker in this module's tests and again at the
//! full model level.

use crate::error::{Error, Result};
use crate::rng::RngState;

use super::Matrix;

/// Added to masked logits instead of using non-finite values, so the
/// softmax backward rule needs no special cases.
pub const MASK_SENTINEL: f64 = -1e30;
/// Batch/layer normalisation variance floor.
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
/// Fraction of the batch statistics blended into the running statistics
/// each training step: `running = (1 - m) * running + m * batch`.
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the
/// cross-entropy so the loss stays finite for saturated outputs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Whether stochastic layers (dropout) and batch statistics are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_same_shape(op: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "{op}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn check_width(op: &str, x: &Matrix, v: usize) -> Result<()> {
    if x.cols() != v {
        return Err(Error::Shape(format!(
            "{op}: matrix width {} vs vector length {v}",
            x.cols()
        )));
    }
    Ok(())
}

/// Row-wise softmax over unmasked columns; masked columns come out exactly 0.
///
/// The mask applies to columns and is shared by all rows. Masked logits get
/// [`MASK_SENTINEL`] added, which underflows to zero weight after the
/// max-shifted exponential.
pub fn masked_softmax(logits: &Matrix, mask: &[bool]) -> Result<Matrix> {
    check_width("masked_softmax", logits, mask.len())?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateMask(
            "masked_softmax: every column is masked".into(),
        ));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            let eff = if mask[j] { v } else { v + MASK_SENTINEL };
            if eff > max {
                max = eff;
            }
        }
        let out_row = out.row_mut(r);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let eff = if mask[j] { v } else { v + MASK_SENTINEL };
            let e = (eff - max).exp();
            out_row[j] = e;
            sum += e;
        }
        for v in out_row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Backward rule for softmax: `dS = P ⊙ (dP − rowsum(dP ⊙ P))`.
///
/// Masked columns have probability exactly 0 and therefore gradient 0, so
/// no mask argument is needed.
pub fn masked_softmax_backward(probs: &Matrix, d_probs: &Matrix) -> Result<Matrix> {
    check_same_shape("masked_softmax_backward", probs, d_probs)?;
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let mut dot = 0.0;
        for (a, b) in dp.iter().zip(p) {
            dot += a * b;
        }
        let o = out.row_mut(r);
        for j in 0..p.len() {
            o[j] = p[j] * (dp[j] - dot);
        }
    }
    Ok(out)
}

/// Negative entries clamp to zero. The comparison is written so NaN and
/// +∞ propagate instead of being silently flattened to zero — a diverged
/// activation must stay visible in the loss.
pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v < 0.0 { 0.0 } else { v })
}

/// Gradient through ReLU given the *output* of the forward pass.
pub fn relu_backward(output: &Matrix, d_out: &Matrix) -> Result<Matrix> {
    check_same_shape("relu_backward", output, d_out)?;
    let mut d = d_out.clone();
    for (g, &o) in d.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(d)
}

/// Numerically stable logistic function, elementwise.
pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

#[inline]
fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Broadcast-add a bias row to every row of `x`.
pub fn add_row_bias(x: &mut Matrix, bias: &[f64]) -> Result<()> {
    check_width("add_row_bias", x, bias.len())?;
    for r in 0..x.rows() {
        for (v, &b) in x.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(())
}

/// Mean over unmasked rows of `x`, accumulated in ascending row order.
pub fn masked_mean_rows(x: &Matrix, mask: &[bool]) -> Result<Vec<f64>> {
    if mask.len() != x.rows() {
        return Err(Error::Shape(format!(
            "masked_mean_rows: {} rows vs mask length {}",
            x.rows(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::DegenerateMask(
            "masked_mean_rows: every row is masked".into(),
        ));
    }
    let mut mean = vec![0.0; x.cols()];
    for (r, &keep) in mask.iter().enumerate() {
        if keep {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
    }
    let inv = 1.0 / count as f64;
    for m in &mut mean {
        *m *= inv;
    }
    Ok(mean)
}

/// Saved activations needed by the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Matrix,
    /// Per-feature `1/√(var + eps)` actually used in the forward pass
    /// (batch statistics in train mode, running statistics in eval mode).
    pub inv_std: Vec<f64>,
}

/// Train-mode batch normalisation: per-feature batch statistics, affine
/// transform, and a running-statistics update with momentum [`BN_MOMENTUM`].
///
/// The running variance stores the same biased batch variance used for
/// normalisation.
pub fn batchnorm_forward_train(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
) -> Result<(Matrix, BatchNormCache)> {
    if x.rows() < 2 {
        return Err(Error::Config(format!(
            "batch normalisation needs at least 2 rows in train mode, got {}",
            x.rows()
        )));
    }
    check_width("batchnorm", x, gamma.len())?;
    check_width("batchnorm", x, beta.len())?;
    check_width("batchnorm", x, running_mean.len())?;
    check_width("batchnorm", x, running_var.len())?;
    let n = x.rows() as f64;
    let cols = x.cols();
    let mut mean = vec![0.0; cols];
    for r in 0..x.rows() {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; cols];
    for r in 0..x.rows() {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Matrix::zeros(x.rows(), cols);
    let mut y = Matrix::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let hr = xhat.row_mut(r);
        for j in 0..cols {
            hr[j] = (xr[j] - mean[j]) * inv_std[j];
        }
        let yr = y.row_mut(r);
        for j in 0..cols {
            yr[j] = gamma[j] * hr[j] + beta[j];
        }
    }
    for j in 0..cols {
        running_mean[j] = (1.0 - BN_MOMENTUM) * running_mean[j] + BN_MOMENTUM * mean[j];
        running_var[j] = (1.0 - BN_MOMENTUM) * running_var[j] + BN_MOMENTUM * var[j];
    }
    Ok((y, BatchNormCache { xhat, inv_std }))
}

/// Eval-mode batch normalisation using the running statistics.
pub fn batchnorm_forward_eval(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<(Matrix, BatchNormCache)> {
    check_width("batchnorm", x, gamma.len())?;
    check_width("batchnorm", x, beta.len())?;
    check_width("batchnorm", x, running_mean.len())?;
    check_width("batchnorm", x, running_var.len())?;
    let cols = x.cols();
    let inv_std: Vec<f64> = running_var
        .iter()
        .map(|&v| 1.0 / (v + BN_EPS).sqrt())
        .collect();
    let mut xhat = Matrix::zeros(x.rows(), cols);
    let mut y = Matrix::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let hr = xhat.row_mut(r);
        for j in 0..cols {
            hr[j] = (xr[j] - running_mean[j]) * inv_std[j];
        }
        let yr = y.row_mut(r);
        for j in 0..cols {
            yr[j] = gamma[j] * hr[j] + beta[j];
        }
    }
    Ok((y, BatchNormCache { xhat, inv_std }))
}

/// Backward through train-mode batch norm. Returns `(d_x, d_gamma, d_beta)`.
pub fn batchnorm_backward_train(
    cache: &BatchNormCache,
    d_y: &Matrix,
    gamma: &[f64],
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    check_same_shape("batchnorm_backward", &cache.xhat, d_y)?;
    let n = d_y.rows() as f64;
    let cols = d_y.cols();
    let mut d_gamma = vec![0.0; cols];
    let mut d_beta = vec![0.0; cols];
    // Sums of dxh and dxh ⊙ xhat per feature, with dxh = dy * gamma.
    let mut s1 = vec![0.0; cols];
    let mut s2 = vec![0.0; cols];
    for r in 0..d_y.rows() {
        let dy = d_y.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..cols {
            d_gamma[j] += dy[j] * xh[j];
            d_beta[j] += dy[j];
            let dxh = dy[j] * gamma[j];
            s1[j] += dxh;
            s2[j] += dxh * xh[j];
        }
    }
    let mut d_x = Matrix::zeros(d_y.rows(), cols);
    for r in 0..d_y.rows() {
        let dy = d_y.row(r);
        let xh = cache.xhat.row(r);
        let dx = d_x.row_mut(r);
        for j in 0..cols {
            let dxh = dy[j] * gamma[j];
            dx[j] = cache.inv_std[j] / n * (n * dxh - s1[j] - xh[j] * s2[j]);
        }
    }
    Ok((d_x, d_gamma, d_beta))
}

/// Backward through eval-mode batch norm, where the statistics are
/// constants: `d_x = d_y ⊙ gamma ⊙ inv_std`.
pub fn batchnorm_backward_eval(
    cache: &BatchNormCache,
    d_y: &Matrix,
    gamma: &[f64],
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    check_same_shape("batchnorm_backward", &cache.xhat, d_y)?;
    let cols = d_y.cols();
    let mut d_gamma = vec![0.0; cols];
    let mut d_beta = vec![0.0; cols];
    let mut d_x = Matrix::zeros(d_y.rows(), cols);
    for r in 0..d_y.rows() {
        let dy = d_y.row(r);
        let xh = cache.xhat.row(r);
        let dx = d_x.row_mut(r);
        for j in 0..cols {
            d_gamma[j] += dy[j] * xh[j];
            d_beta[j] += dy[j];
            dx[j] = dy[j] * gamma[j] * cache.inv_std[j];
        }
    }
    Ok((d_x, d_gamma, d_beta))
}

/// Saved activations for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    /// Per-row `1/√(var + eps)`.
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalisation with affine transform.
pub fn layernorm_forward(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
) -> Result<(Matrix, LayerNormCache)> {
    check_width("layernorm", x, gamma.len())?;
    check_width("layernorm", x, beta.len())?;
    let cols = x.cols();
    let inv_n = 1.0 / cols as f64;
    let mut xhat = Matrix::zeros(x.rows(), cols);
    let mut y = Matrix::zeros(x.rows(), cols);
    let mut inv_std = vec![0.0; x.rows()];
    for r in 0..x.rows() {
        let xr = x.row(r);
        let mut mean = 0.0;
        for &v in xr {
            mean += v;
        }
        mean *= inv_n;
        let mut var = 0.0;
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = istd;
        let hr = xhat.row_mut(r);
        for j in 0..cols {
            hr[j] = (xr[j] - mean) * istd;
        }
        let yr = y.row_mut(r);
        for j in 0..cols {
            yr[j] = gamma[j] * hr[j] + beta[j];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Backward through layer norm. Returns `(d_x, d_gamma, d_beta)`.
pub fn layernorm_backward(
    cache: &LayerNormCache,
    d_y: &Matrix,
    gamma: &[f64],
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    check_same_shape("layernorm_backward", &cache.xhat, d_y)?;
    let cols = d_y.cols();
    let inv_n = 1.0 / cols as f64;
    let mut d_gamma = vec![0.0; cols];
    let mut d_beta = vec![0.0; cols];
    let mut d_x = Matrix::zeros(d_y.rows(), cols);
    for r in 0..d_y.rows() {
        let dy = d_y.row(r);
        let xh = cache.xhat.row(r);
        let mut m1 = 0.0; // mean of dxh
        let mut m2 = 0.0; // mean of dxh ⊙ xhat
        for j in 0..cols {
            d_gamma[j] += dy[j] * xh[j];
            d_beta[j] += dy[j];
            let dxh = dy[j] * gamma[j];
            m1 += dxh;
            m2 += dxh * xh[j];
        }
        m1 *= inv_n;
        m2 *= inv_n;
        let istd = cache.inv_std[r];
        let dx = d_x.row_mut(r);
        for j in 0..cols {
            let dxh = dy[j] * gamma[j];
            dx[j] = istd * (dxh - m1 - xh[j] * m2);
        }
    }
    Ok((d_x, d_gamma, d_beta))
}

/// Inverted dropout. In train mode each entry is zeroed independently with
/// probability `p` and survivors are scaled by `1/(1-p)`; eval mode (and
/// `p = 0`) is exactly the identity. The returned factor vector (one entry
/// per matrix cell, row-major) is what the backward pass multiplies by.
pub fn dropout_forward(
    x: &Matrix,
    p: f64,
    rng: &RngState,
    mode: Mode,
) -> Result<(Matrix, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let scale = 1.0 / (1.0 - p);
    let mut stream = rng.stream();
    let mut factors = Vec::with_capacity(x.rows() * x.cols());
    let mut y = x.clone();
    for v in y.data_mut() {
        let f = if stream.uniform() < p { 0.0 } else { scale };
        *v *= f;
        factors.push(f);
    }
    Ok((y, Some(factors)))
}

/// Backward through dropout: multiply by the saved factors (identity if the
/// forward pass was an identity).
pub fn dropout_backward(d_y: &Matrix, factors: Option<&[f64]>) -> Matrix {
    match factors {
        None => d_y.clone(),
        Some(f) => {
            let mut d = d_y.clone();
            for (g, &k) in d.data_mut().iter_mut().zip(f) {
                *g *= k;
            }
            d
        }
    }
}

fn check_targets_binary(targets: &Matrix) -> Result<()> {
    for &t in targets.data() {
        if t != 0.0 && t != 1.0 {
            return Err(Error::Validation(format!(
                "cross-entropy target must be exactly 0 or 1, got {t}"
            )));
        }
    }
    Ok(())
}

/// Mean binary cross-entropy from probabilities, with the gradient taken
/// with respect to the pre-sigmoid logits.
///
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`; the
/// gradient is `(ŷ − y) / cell_count` with the clamped ŷ.
pub fn bce_loss(probs: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    check_same_shape("bce_loss", probs, targets)?;
    check_targets_binary(targets)?;
    let count = (probs.rows() * probs.cols()) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for (i, (&p, &y)) in probs.data().iter().zip(targets.data()).enumerate() {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.data_mut()[i] = (p - y) / count;
    }
    Ok((loss / count, grad))
}

/// Mean binary cross-entropy straight from logits, using the stable
/// log-sigmoid form. Numerically this is the composition of `sigmoid` and
/// [`bce_loss`] and it honours the same probability clamp.
pub fn bce_from_logits(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    check_same_shape("bce_from_logits", logits, targets)?;
    check_targets_binary(targets)?;
    let count = (logits.rows() * logits.cols()) as f64;
    let lo = PROB_CLAMP.ln();
    let hi = (1.0 - PROB_CLAMP).ln();
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, (&z, &y)) in logits.data().iter().zip(targets.data()).enumerate() {
        // ln σ(z) = −softplus(−z); ln(1 − σ(z)) = −softplus(z).
        let log_p = (-softplus(-z)).clamp(lo, hi);
        let log_q = (-softplus(z)).clamp(lo, hi);
        loss -= y * log_p + (1.0 - y) * log_q;
        let p = sigmoid_scalar(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        grad.data_mut()[i] = (p - y) / count;
    }
    Ok((loss / count, grad))
}
