//! Layer-wise transfer diagnostics on a miniature transformer encoder.
//!
//! The crate bundles everything needed to study how attention saturation
//! suppresses backward gradient flow during fine-tuning, and to act on it:
//!
//! * [`tensor`] — dense f64 tensors with a re-executable compute graph,
//!   reverse-mode differentiation, activation-gradient tap points, and a
//!   finite-difference oracle;
//! * [`model`] — a configurable small transformer encoder with per-layer
//!   trainability control and bitwise-reproducible checkpoints;
//! * [`lora`] — low-rank adapters mountable on Q/K/V projections,
//!   trainable with a frozen backbone and mergeable at inference;
//! * [`diag`] — attention entropy, activation/parameter gradient norms,
//!   and representation-change (CKA under a shared PCA basis) metrics;
//! * [`locator`] — turns entropy/gradient profiles into an adapter
//!   injection band (score-based and greedy variants);
//! * [`probes`] — linear and MLP probes over per-layer [CLS] vectors;
//! * [`harness`] — synthetic source/target tasks, UNDER/OVER pretraining,
//!   the four fine-tuning strategies, and multi-seed aggregation;
//! * [`report`] — CSV/JSON artifact writers and deterministic SVG plots.

pub mod config;
pub mod diag;
pub mod error;
pub mod harness;
pub mod locator;
pub mod lora;
pub mod model;
pub mod probes;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
