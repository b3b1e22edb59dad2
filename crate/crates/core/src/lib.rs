//! Compression engine and experiment harness for small convolutional
//! acoustic scene classifiers.
//!
//! The pipeline chains five stages: data augmentation, teacher-student
//! distillation, lottery-ticket pruning with rewind to the recorded
//! initialization, two-stage coarse/fine score fusion, and post-training
//! int8 dynamic-range quantization, with model sizes accounted by non-zero
//! parameter count throughout.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
