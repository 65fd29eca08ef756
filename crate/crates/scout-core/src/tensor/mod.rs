//! Minimal deterministic f64 tensor kernel.
//!
//! Everything the model needs — dense matrices, a handful of forward
//! operations, their hand-written backward rules and a finite-difference
//! gradient checker — lives here. There is no BLAS and no SIMD intrinsics;
//! determinism comes from fixed summation orders, and speed from
//! cache-friendly loop nests the compiler can vectorise without
//! reassociating any sum.

mod gradcheck;
mod matrix;
mod ops;
mod param;

pub use gradcheck::{grad_check, ClosureTarget, GradCheckReport, GradTarget, GRAD_CHECK_STEP};
pub use matrix::Matrix;
pub use ops::{
    add_row_bias, batchnorm_backward_eval, batchnorm_backward_train, batchnorm_forward_eval,
    batchnorm_forward_train, bce_from_logits, bce_loss, dropout_backward, dropout_forward,
    layernorm_backward, layernorm_forward, masked_mean_rows, masked_softmax,
    masked_softmax_backward, relu, relu_backward, sigmoid, BatchNormCache, LayerNormCache,
    Mode, BN_EPS, BN_MOMENTUM, LN_EPS, MASK_SENTINEL, PROB_CLAMP,
};
pub use param::Param;
