//! Concept-aligned chest X-ray classification with retrieval-augmented,
//! knowledge-guided report prompting.
//!
//! The pipeline: diagnostic criteria ([`knowledge`]) are embedded by a frozen
//! text encoder ([`encoders`]); learnable concept tokens attend over image
//! features and are aligned to those embeddings ([`alignment`]); the attended
//! tokens index historical reports ([`retrieval`]); classification, per-criterion
//! findings and retrieved cases are rendered into a prompt for an LLM
//! ([`promptgen`]). [`metrics`] and [`datagen`] support desk-scale evaluation.

pub mod alignment;
pub mod datagen;
pub mod encoders;
pub mod interpret;
pub mod io;
pub mod knowledge;
pub mod metrics;
pub mod promptgen;
pub mod retrieval;
