//! Deterministic federated-learning simulator with loss-aware aggregation
//! strategies and a built-in convergence-analysis harness.
//!
//! The library simulates synchronous federated training — broadcast,
//! local mini-batch SGD, weighted aggregation — under four aggregation
//! strategies, and computes every quantity appearing in the accompanying
//! convergence analysis (heterogeneity Γ, weighting skew ρ, per-step
//! bound envelopes, discrepancy bounds) on testbeds whose optima are
//! known analytically.

pub mod aggregation;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod logio;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod schedule;
pub mod vector;

pub use error::{FedError, Result};
