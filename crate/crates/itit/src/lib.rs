//! Cycle-consistency training for bidirectional image-text generation on
//! procedurally generated scenes.
//!
//! The crate bundles a small reverse-mode autodiff engine, a deterministic
//! synthetic dataset with exact semantic oracles, a k-means patch quantizer,
//! a joint image-text encoder with disjoint text/image decoders, paired and
//! cycle training objectives, parallel-decoding / beam-search samplers, and a
//! training harness with a CLI.
//!
//! Batch-level work (per-record gradients, rendering, evaluation sweeps) is
//! data-parallel via rayon when the default `parallel` feature is enabled;
//! the sequential fallback produces bit-identical results.

pub mod error;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod par;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
