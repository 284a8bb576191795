//! Federated, differentially private traffic prediction with fairness-aware
//! route assignment.
//!
//! The crate is organized bottom-up:
//!
//! - [`network`]: road graph, regional partition, CSV ingestion
//! - [`metrics`]: regional loads, Gini / Jain fairness measures
//! - [`gnn`]: attention message-passing network with a GRU state and
//!   hand-written reverse-mode gradients
//! - [`privacy`]: Gaussian mechanism, clipping, composition accounting
//! - [`federated`]: rounds, client selection, quantization, byte ledger
//! - [`routing`]: candidate generation and Pareto route selection
//! - [`sim`]: BPR ground truth, demand, scenario driver, comparison tables
//! - [`cli`]: the `fedfair` command-line front end
//!
//! Data-parallel loops go through [`par::Exec`], which runs on rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod cli;
pub mod federated;
pub mod gnn;
pub mod metrics;
pub mod network;
pub mod par;
pub mod privacy;
pub mod rng;
pub mod routing;
pub mod sim;
pub mod tensor;
