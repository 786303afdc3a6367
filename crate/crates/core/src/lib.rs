//! Multi-layer attentive probing on frozen Vision Transformer features.
//!
//! The crate trains lightweight probes on pre-extracted per-layer summary
//! tokens (`CLS` and average-pooled patch tokens). The central probe fuses
//! the stacked per-layer tokens with a learned multi-head cross-attention
//! query; linear (concatenation) and all-token attentive probes are provided
//! as baselines.
//!
//! Module map:
//!
//! * [`reprstore`]: the `.lfr` feature-store format and feature preparation.
//! * [`diffcore`]: dense kernels with analytic gradients, AdamW, schedules.
//! * [`probes`]: probe architectures, parameter accounting, checkpoints.
//! * [`trainer`]: training loop, grid search, seed studies.
//! * [`analysis`]: metrics, attention heatmaps, CKA, reports.
//! * [`synthgen`]: deterministic synthetic feature stores.
//! * [`cli`]: the `layerfuse` command-line surface.

pub mod analysis;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod par;
pub mod probes;
pub mod reprstore;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngStream;

/// Version string written into every provenance block.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
