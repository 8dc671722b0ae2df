//! Mixture of LoRA experts over a frozen decoder-only transformer.
//!
//! The engine adapts a frozen base model with low-rank experts arranged in
//! gated and gate-sharing MoE layers, routes each instance once from its
//! instruction embedding, trains in three stages (single LoRA, MoE with
//! gates, experts with gates frozen), and measures multi-task conflict on a
//! synthetic corpus of deliberately clashing tasks.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod optim;
pub mod adapters;
pub mod model;
pub mod routing;
pub mod taskgen;
pub mod training;
pub mod config;
pub mod checkpoint;
pub mod eval;
pub mod selfcheck;
pub mod cli;

pub use error::{Error, Result};
