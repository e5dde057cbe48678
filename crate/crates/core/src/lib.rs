//! Core library for patch-based slice triage experiments on bi-parametric MRI.
//!
//! The crate is organised around the stages of an experiment:
//!
//! - [`types`] / [`io`] — domain types and the portable on-disk tensor format
//! - [`phantom`] / [`ingest`] — synthetic cohort generation and cohort ingestion
//! - [`preprocess`] — slice resampling, percentile normalization, channel replication
//! - [`cohort`] — slice labeling and patient-stratified splitting
//! - [`patching`] — non-overlapping patch grids, frequency maps, top-k selection
//! - [`augment`] — stochastic training-time augmentation
//! - [`nn`] — CNN backbones, losses, optimizer, checkpoints
//! - [`train`] — training loops and the transfer-learning protocols
//! - [`metrics`] — confusion counts, ROC curves and AUC
//!
//! Everything is deterministic given explicit seeds; no global RNG state.

pub mod augment;
pub mod cohort;
pub mod ingest;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod patching;
pub mod phantom;
pub mod preprocess;
pub mod train;
pub mod types;

pub use types::{LesionMask, Modality, Significance, SliceSample, Volume};
