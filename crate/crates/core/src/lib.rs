//! Recurrence-augmented Transformer encoders at desk scale.
//!
//! The crate builds up in layers:
//! - [`tensor`]: dense 2-D arrays, an eager reverse-mode autodiff graph,
//!   seeded randomness and a finite-difference gradient checker;
//! - [`nn`]: pre-norm attention with xPos relative positions, feed-forward,
//!   the gated feed-forward, and pooling;
//! - [`halting`]: the shared probabilistic halting algebra (conditional to
//!   unconditional probabilities, output marginalization, early stopping,
//!   the ACT penalty);
//! - [`models`]: the Transformer / UT / GUT / TLB / GUTLB / TLB-fixed
//!   assemblies with classification and causal-LM heads plus checkpoints;
//! - [`tasks`]: generators, exact oracles and line-delimited serialization
//!   for ListOps, flip-flop language modeling and logical inference;
//! - [`harness`]: training with the composite objective, evaluation, and
//!   the dynamic-halting runtime benchmark.

pub mod error;
pub mod exec;
pub mod halting;
pub mod harness;
pub mod models;
pub mod tasks;
pub mod nn;
pub mod tensor;
