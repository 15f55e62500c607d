//! Desk-scale laboratory for lifelong knowledge editing in GPT-style
//! transformers.
//!
//! The crate is organized around six pieces:
//!
//! - [`model`] — a minimal decoder-only transformer with deterministic
//!   forward passes, hidden-state capture, residual injection, gradients
//!   at injection sites, byte/BPE tokenization, and a binary tensor
//!   container for weights.
//! - [`editor`] — single rank-one knowledge edits: key extraction from the
//!   FFN, value optimization against a prefixed-prompt objective, the
//!   minimal-norm rank-one update to the projection matrix, and rollback
//!   edits that force a fact back to its original target.
//! - [`selector`] — per-layer activation/delta profiles and the wise-layer
//!   rule that picks the editing layer per fact, plus the ablated variants.
//! - [`toxicity`] — parameter-residue measurement after edit+rollback,
//!   per-step norm traces, per-layer edit sweeps, heatmap export, and the
//!   flash-case splitter.
//! - [`cma`] — causal mediation analysis: corrupt subject embeddings,
//!   restore single clean states, and grid the indirect effects.
//! - [`harness`] — dataset ingestion, known-knowledge filtering, the
//!   two-stage edit/rollback lifelong protocol, ES/GS/LS/ERS/ORS metrics
//!   with a harmonic-mean composite, and a toy-KB trainer.
//!
//! Everything is 32-bit floats and deterministic given a seed: identical
//! inputs produce bitwise-identical outputs regardless of thread count.

pub mod cma;
pub mod editor;
pub mod error;
pub mod harness;
pub mod model;
pub mod rng;
pub mod selector;
pub mod svg;
pub mod tensor;
pub mod toxicity;

pub use error::{Error, Result};
pub use model::{Intervention, Model, ModelConfig, Site, SiteKind};
