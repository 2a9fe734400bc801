//! Dynamic functional-connectivity graphs and spatio-temporal masked
//! autoencoder pre-training.
//!
//! The pipeline runs in five stages:
//! - [`ingest`]: ROI time-series I/O, synthetic cohorts, fold splits, segment sampling
//! - [`dynfc`]: sliding-window Pearson graphs with top-k thresholding and graph statistics
//! - [`model`]: time encoder, GIN encoder, node/edge decoders, SERO readout and heads,
//!   all on top of the reverse-mode [`tape`]
//! - [`ssl`]: masking plus spatial and temporal reconstruction objectives
//! - [`train`] and [`eval`]: optimizer, schedules, pre-training, fine-tuning, metrics
//!   and the ablation harness
//!
//! Everything is 64-bit and deterministic given explicit seeds.

pub mod config;
pub mod dynfc;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod plot;
pub mod rng;
pub mod ssl;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
