//! Desk-scale distillation of autoregressive multimodal sequence models.
//!
//! A toy teacher/student transformer pair over a synthetic grid-QA task,
//! the full alignment loss stack (supervised fine-tuning, forward-KL
//! distillation, instruction-aware vision alignment, transition-probability
//! alignment with ribbon-mask parallelization), attention-relevance layer
//! selection, and exposure-bias measurement.

pub mod biasmetrics;
pub mod error;
pub mod harness;
pub mod irs;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod synthdata;

pub use error::{Error, Result};
