//! Multi-cloud PaaS control plane running against a deterministic simulated
//! cloud fabric.
//!
//! The crate is organized around the control-plane roles:
//!
//! - [`manifest`]: annotated application descriptors, constraints and
//!   elasticity rules, contribution packages.
//! - [`fabric`]: the simulated providers, nodes, VM taxonomy and clock.
//! - [`deployer`]: constraint validation, lowest-price placement and the
//!   provisioning/platform/application deployment sequence.
//! - [`telemetry`]: per-instance metric sampling and health checks.
//! - [`workload`]: event correlation, drift indicators, the inter-arrival
//!   EWMA and threshold-based elasticity checks.
//! - [`controller`]: transactional system state, leader election,
//!   fail-over and coordinated checkpoints.
//! - [`balancer`]: routing table, round-robin dispatch and health gating.
//! - [`harness`]: scenario runner, reports, availability and overhead.

pub mod api;
pub mod balancer;
pub mod controller;
pub mod deployer;
pub mod fabric;
pub mod harness;
pub mod log;
pub mod manifest;
pub mod telemetry;
pub mod time;
pub mod workload;

pub use time::SimTime;
