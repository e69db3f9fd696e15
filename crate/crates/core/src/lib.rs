//! Face security self-supervised pretraining.
//!
//! Facial masking (CRFR-P and its baselines), a masked-autoencoder online
//! branch with an EMA target branch for self-distillation, the combined
//! pretraining objective, a finetune harness with AUC/HTER metrics, and
//! attention diagnostics.

pub mod backbone;
pub mod diagnostics;
pub mod downstream;
pub mod error;
pub mod facedata;
pub mod fixtures;
pub mod masking;
pub mod objectives;
pub mod pretrainer;
pub mod rng;

pub use error::{Error, Result};
