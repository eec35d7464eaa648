//! Music genre classification built on a channel-separated ECAPA-TDNN.
//!
//! The crate is organized around the end-to-end pipeline:
//!
//! - [`tensor`] — dense f64 tensors with tape-based reverse-mode autodiff
//! - [`nn`] — the layer vocabulary: Conv1d+BN+ReLU, dilated Res2 convolution,
//!   squeeze-excitation, attentive statistics pooling, linear classifier
//! - [`model`] — the full network, its channel-separation routing and the
//!   four-branch frequency sub-band variant
//! - [`features`] — WAV ingestion, resampling, STFT and log-mel extraction
//! - [`data`] — manifests, label mapping, stratified k-fold plans, crop
//!   sampling, batching and the binary feature archive format
//! - [`training`] — cross-entropy loss, Adam, cosine LR annealing, the fold
//!   training loop, evaluation (with optional test-time augmentation),
//!   metrics and checkpoints

pub mod data;
pub mod features;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
