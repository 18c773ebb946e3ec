//! Desk-scale malaria thin-smear cell classification.
//!
//! `plasm` is a from-scratch pipeline for classifying blood cell images as
//! parasitized or uninfected:
//!
//! - [`tensor`] — dense `f64` tensors with reverse-mode automatic
//!   differentiation over a recorded [`tensor::Tape`].
//! - [`model`] — declarative residual (and plain, skip-free) convolutional
//!   classifiers with a CRC-checked binary checkpoint format.
//! - [`augment`] — MixUp and CutMix batch augmentation with exact soft-label
//!   arithmetic and replayable provenance.
//! - [`train`] — binary-cross-entropy training with Adam, parameter freezing,
//!   and best-validation checkpointing.
//! - [`metrics`] — confusion matrices, accuracy/precision/recall, and
//!   fixed-width comparison tables.
//! - [`baselines`] — a random forest over hand-crafted color features and an
//!   Otsu + watershed stain detector, both usable as classifiers.
//! - [`data`] — NIH-style image folder ingestion, stratified 7:2:1 splits,
//!   and a seeded synthetic cell-image generator.
//!
//! Everything is deterministic under explicit seeds: identical inputs and
//! seeds produce byte-identical artifacts (checkpoints, logs, reports).

pub mod augment;
pub mod baselines;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
