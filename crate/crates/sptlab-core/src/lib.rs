//! Self-pretraining laboratory for small attention models.
//!
//! The crate trains small transformers in two phases — masked reconstruction
//! on unlabeled sequences, then label finetuning — and provides the
//! instruments to dissect where the resulting gain lives: freezing and
//! hybrid-initialization ablations, attention-map diagnostics, Frobenius
//! displacement reports, and a numerical verifier for the first-order theory
//! of why label supervision alone cannot see the attention-score directions
//! that masked reconstruction exploits.
//!
//! Layering, bottom to top:
//! - [`numeric`]: matrices, seeded RNG streams, softmax, finite differences.
//! - [`datagen`]: the two-class synthetic sequence task and JSONL ingestion.
//! - [`model`]: manual forward/backward for the pre-norm transformer and the
//!   attention-only toy variant, with pluggable positional encodings.
//! - [`objectives`], [`optimizer`], [`checkpoint`]: losses, AdamW with
//!   parameter-block freezing and hybrid init, bit-exact serialization.
//! - [`experiments`], [`inspect`], [`theory`]: training pipelines, sweeps,
//!   attention probes, and the score-direction analysis.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod inspect;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod optimizer;
pub mod theory;

pub use error::{Error, Result};
pub use numeric::{Matrix, SeededRng};
