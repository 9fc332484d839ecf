//! Conversation re-entry prediction.
//!
//! The crate predicts whether the author of the final observed turn of a
//! conversation (the *target user*) will post again later in the same
//! conversation. A hierarchical bidirectional-GRU model encodes turns, the
//! target's chatting history and the conversation, and is trained jointly
//! with three self-supervised auxiliary objectives derived from the author
//! sequence alone:
//!
//! - **SP** (spread pattern): is the observed context focused (at most two
//!   participants) or expansionary?
//! - **RT** (repeated target): has the target already posted earlier in the
//!   context?
//! - **TA** (turn authorship): for every earlier turn, was it written by the
//!   target?
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: dense tensors, a reverse-mode tape, a fused GRU cell and a
//!   finite-difference gradient checker.
//! - [`corpus`]: JSONL ingestion, vocabulary, instance extraction, chatting
//!   histories and dataset splits.
//! - [`labeling`]: thread patterns and the auxiliary labels.
//! - [`synth`]: synthetic corpora with controllable pattern statistics.
//! - [`model`]: encoders, heads and checkpoints.
//! - [`training`]: losses, class weights, Adam and the training loop.
//! - [`eval`]: AUC, confusion-matrix metrics and per-pattern breakdowns.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod labeling;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
