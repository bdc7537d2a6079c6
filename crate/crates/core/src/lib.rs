//! Guidance-driven data augmentation for named-entity-recognition corpora.
//!
//! The crate covers the whole augmentation side: the CoNLL corpus model,
//! rule-based baselines, an LLM completion gateway with record/replay,
//! prompt construction and reply validation, the run pipeline with its
//! manifest, BLEU-4 diversity reporting, and a reader for the evaluation
//! results produced by the downstream trainer.

pub mod corpus;
pub mod diversity;
pub mod error;
pub mod llm;
pub mod pipeline;
pub mod prompt;
pub mod results;
pub mod rng;
pub mod rule_augment;
pub mod synth;

pub use error::{Error, Result};

/// BLEU settings over `f64`, the precision used by reports and the CLI.
pub type BleuConfig = diversity::BleuConfig<f64>;
/// Diversity report over `f64` scores.
pub type DiversityReport = diversity::Report<f64>;
/// Single-precision BLEU settings, for bulk scoring where memory matters.
pub type BleuConfigF32 = diversity::BleuConfig<f32>;
