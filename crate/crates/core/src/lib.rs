//! Composer classification from symbolic piano performances.
//!
//! The pipeline runs in five stages, one module each:
//!
//! - [`smf`]: Standard MIDI File parsing into absolute-time [`smf::NoteEvent`]s.
//! - [`pianoroll`]: two-channel (onset, frame) piano rolls at 0.05 s × 1 semitone,
//!   fixed 400-bin segments and the input ablation variants.
//! - [`dataset`]: metadata ingestion, composer filtering, stratified splitting and
//!   training-segment sampling.
//! - [`nn`]: a small dense-tensor engine with hand-written backward passes and a
//!   configurable-depth residual CNN.
//! - [`train`] and [`eval`]: SGD with momentum under cosine annealing, piece-level
//!   majority voting, weighted F1, Spearman analyses and the ablation sweep.
//!
//! Data-parallel inner loops go through [`parallel`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod dataset;
pub mod eval;
pub mod nn;
pub mod parallel;
pub mod pianoroll;
pub mod smf;
pub mod train;

#[cfg(feature = "testkit")]
pub mod testkit;

use thiserror::Error;

/// Any error surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Smf(#[from] smf::SmfError),
    #[error(transparent)]
    Roll(#[from] pianoroll::RollError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
