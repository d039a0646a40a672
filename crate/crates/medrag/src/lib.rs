//! Desk-scale simulator of a multimodal retrieval-augmented generation
//! pipeline for medical visual question answering, together with the
//! knowledge-base poisoning attacks that target it and an experiment
//! harness that measures the damage.
//!
//! The pipeline mirrors a production medical RAG stack at toy scale:
//!
//! - [`encoder`] — deterministic text/image encoders into one joint space
//! - [`kb`] — a semi-open knowledge base with provenance, a stealth-gated
//!   injection path, snapshots, and rollback
//! - [`retrieval`] — threshold-filtered Top-M similarity search
//! - [`rerank`] — pluggable relevance re-scoring down to Top-K
//! - [`generator`] — a differentiable toy answer model with exact gradients
//! - [`attacks`] — textual, visual, and cross-modal poisoning optimizers
//! - [`diffusion`] — a minimal DDPM used to synthesize attack seed images
//! - [`harness`] — synthetic benchmark, experiment grid, metrics, reports
//!
//! Every stage is seeded and reproducible: identical seeds give
//! byte-identical knowledge bases, attack traces, and metric reports.
//! Start with the `examples/` directory; each example exercises one
//! capability end to end.

pub mod attacks;
pub mod cli;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod harness;
pub mod kb;
pub mod rerank;
pub mod retrieval;
pub mod vecmath;

pub use error::{Error, ErrorCategory, Result};
pub use vecmath::{Embedding, PixelGrid};
