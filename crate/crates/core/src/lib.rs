//! Fairness evaluation of single-agent and multi-agent-debate (MAD)
//! classifiers on tabular data.
//!
//! The pipeline: [`tabular`] turns CSV rows into prompts, [`agents`] answers
//! them (mock, replay or HTTP backends), [`debate`] runs the Memory and
//! CollRef protocols, [`fairness`] computes group deltas, [`analysis`]
//! pools proportional bias changes, and [`harness`] ties it together behind
//! the [`cli`].

pub mod agents;
pub mod analysis;
pub mod cli;
pub mod debate;
pub mod fairness;
pub mod harness;
pub mod tabular;
