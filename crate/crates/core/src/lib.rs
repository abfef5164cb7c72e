//! Desk-scale orchestration for multilingual encoder pretraining.
//!
//! The crate covers the whole pipeline of a three-phase encoder run:
//!
//! * [`schedule`]: learning rate, batch size, sequence length and rotary base per step.
//! * [`mixture`]: deduplication, PII scrubbing, edu filtering, oversampling and audits.
//! * [`tokenize`]: byte-level BPE, vocabulary planning and fertility.
//! * [`encoder`]: a small ModernBERT-style encoder with hand-written backprop.
//! * [`trainer`]: masking, AdamW and the seeded MLM training loop.
//! * [`cost`]: energy, emissions and price estimates.
//! * [`retrieval`]: nDCG@k over TREC-style runs.
//! * [`config`]: the shared run-config format.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iterators otherwise.

pub mod config;
pub mod cost;
pub mod encoder;
mod error;
pub mod fixtures;
pub mod mixture;
pub mod par;
pub mod retrieval;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod tokenize;
pub mod trainer;

pub use error::{Error, Result, Warning};
