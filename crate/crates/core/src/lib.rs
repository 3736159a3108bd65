//! Teacher-student knowledge distillation for small sequence-to-sequence transcription models,
//! with an Arabic-aware WER/CER evaluation harness.

pub mod analysis;
pub mod data;
pub mod distill;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
mod tensorfile;
pub mod textnorm;
