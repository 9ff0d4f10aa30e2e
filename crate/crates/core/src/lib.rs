//! Deterministic desk-scale simulator of a blockchain-coordinated federated
//! learning network.
//!
//! Participants train on private datasets, publish pairwise-masked updates to
//! a content-addressed store, and register them on a simulated chain. A
//! master aggregator combines subgroup sums recovered by secure aggregation.
//! After the final round, staked evaluators benchmark each participant's
//! model inside a simulated secure environment, commit and reveal their
//! scores, and the chain settles the escrowed reward with median-based
//! scoring. Evaluator stakes are self-assessed NFTs under Harberger taxation.
//!
//! Every source of randomness flows from one scenario seed through named
//! substreams (see [`rng`]), so identical scenarios yield byte-identical
//! transaction logs and metrics.

pub mod adversary;
pub mod auditing;
pub mod content_store;
pub mod economics;
pub mod fl;
pub mod ledger;
pub mod orchestrator;
pub mod rng;
pub mod secure_agg;
pub mod types;

pub use types::{AgentId, Score, TaskId};
