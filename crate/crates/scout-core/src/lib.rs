//! Desk-scale pipeline for distilling a heavyweight scenario-labelling
//! oracle into a small surrogate classifier.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — a minimal, deterministic f64 matrix kernel with
//!   hand-written forward/backward rules and a finite-difference checker.
//! * [`taxonomy`] — the conflict-type label space and its group structure.
//! * [`data`] — synthetic scene generator, calibrated noisy teacher,
//!   deterministic splits and the JSONL dataset format.
//! * [`model`] — the attention-pooled residual classifier and its
//!   checkpoint format.
//! * [`train`] — AdamW training with early stopping, a logistic-regression
//!   baseline and shared evaluation.
//! * [`metrics`] — multi-label precision/recall/F1 with per-group
//!   aggregation, plus a naive reference implementation used as an oracle.
//! * [`ablation`] — the variant/seed ablation grid and an inference
//!   micro-benchmark.
//! * [`experiment`] — one TOML-configurable bundle tying the stages
//!   together under a single seed.
//!
//! Everything is deterministic: a fixed seed reproduces every byte of
//! every artifact on the same platform, independent of thread count.

pub mod ablation;
pub mod data;
pub mod digest;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod taxonomy;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
