//! Toy dual-tower flow-matching stack for joint video/audio latents.
//!
//! The crate bundles a small reverse-mode autodiff core, per-modality shifted
//! noise schedules, time-aligned rotary positions, a dual-tower transformer
//! joined by bidirectional cross-attention, dual classifier-free guidance,
//! a trainer and Euler sampler over synthetic bimodal scenes, data-curation
//! windowing and gating, and arena-style evaluation metrics.

pub mod autodiff;
pub mod curation;
pub mod engine;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod rope;
pub mod schedule;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
