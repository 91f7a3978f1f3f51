//! Cross-task content moderation evaluation.
//!
//! The pipeline: a taxonomy-tagged task registry ([`taxonomy`]), guideline
//! definitions compiled into deterministic classification prompts
//! ([`guideline`]), dataset ingestion and sampling ([`corpus`]), pluggable
//! model endpoints ([`modelclient`]), strict `Label: N` response parsing
//! ([`parsing`]), support-weighted scoring ([`metrics`]), retrieval-based
//! few-shot assembly ([`fewshot`]), and an orchestrating runner with response
//! caching and reproducible reports ([`runner`]).

pub mod corpus;
pub mod fewshot;
pub mod guideline;
pub mod label;
pub mod metrics;
pub mod modelclient;
pub mod numeric;
pub mod parsing;
pub mod runner;
pub mod taxonomy;

/// Scalar used for similarities, metric values, and report cells.
pub type Score = f64;

/// Few-shot index over single-precision vectors (the usual wire format).
pub type EmbeddingIndexF32 = fewshot::EmbeddingIndex<f32>;

/// Few-shot index over double-precision vectors.
pub type EmbeddingIndexF64 = fewshot::EmbeddingIndex<f64>;
