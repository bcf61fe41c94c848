//! Layer-integrated memory transformers.
//!
//! This crate implements a small decoder-only transformer family in which
//! every layer can read the key/value streams of *all* earlier layers
//! through a learned per-head router, together with everything needed to
//! study that mechanism end to end on a single CPU:
//!
//! * [`tensor`] — a flat-buffer `f32` tensor type plus a reverse-mode
//!   autodiff graph, the dense kernels behind it, an AdamW optimizer and
//!   seeded RNG streams.
//! * [`model`] — the decoder itself: RMSNorm/SwiGLU blocks, grouped-query
//!   attention with rotary embeddings, the cross-layer KV router and its
//!   masked variants, plus binary checkpointing.
//! * [`tasks`] — synthetic benchmark generators (arithmetic expression
//!   evaluation and graph-reachability question answering), tokenizers and
//!   dataset I/O.
//! * [`train`] — training loops, LR schedules, evaluation and metrics.
//! * [`diag`] — representation diagnostics: matrix-based Rényi entropy,
//!   linear probes and router inspection.
//! * [`audit`] — closed-form parameter and FLOP accounting.
//! * [`exp`] — pinned experiment recipes with cached, resumable artifacts.
//!
//! The crate is deliberately dependency-light and deterministic: given the
//! same seed, data generation, initialization and training reproduce
//! bit-identical results on the same target.

pub mod audit;
pub mod diag;
pub mod exp;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod train;

/// Crate-wide error type.
///
/// Shape mismatches inside the numeric core are treated as programmer
/// errors and panic; `Error` covers everything user input can trigger:
/// files, malformed data, bad configuration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Data(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
