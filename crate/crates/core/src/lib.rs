//! Desk-scale laboratory for active selective prediction under
//! distribution shift.
//!
//! A selective classifier answers only when its confidence clears a
//! threshold and defers the rest to a human; active learning spends a
//! small labeling budget to adapt the classifier to a shifted test set.
//! This crate implements three adaptation methods over a from-scratch MLP:
//!
//! - softmax response (`sr`): one model, fine-tuned each round;
//! - deep ensembles (`de`): N independently fine-tuned members;
//! - checkpoint ensembles with self-training (`aspest`): a running average
//!   of checkpoint outputs drives margin-based selection and provides soft
//!   pseudo-labels.
//!
//! Around them: the full acquisition-function suite (uncertainty scores,
//! uniform, k-Center-Greedy, CLUE, BADGE), the accuracy/coverage metric
//! family with threshold sweeps, dataset plumbing (CSV ingestion,
//! LOF-based shift splits, a synthetic shifted-mixture generator) and a
//! config-driven experiment harness with deterministic, reproducible runs.

pub mod acquisition;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
