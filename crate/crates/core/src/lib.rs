//! Desk-scale offline data-production toolkit for collider-style event data.
//!
//! The crate models the full offline chain of a high-energy-physics
//! experiment as a set of small, fully testable pieces:
//!
//! - [`event`] — bank-based event data model and the bit-exact container
//!   format with per-bank compression and per-record checksums.
//! - [`pipeline`] — a registry of named processing modules assembled into an
//!   ordered path from a text script and driven over an event stream.
//! - [`generator`] — seeded synthetic event generator standing in for beam
//!   data and detector simulation.
//! - [`production`] — master/worker event distribution with credit-based
//!   flow control, heartbeat fault detection and order-preserving output.
//! - [`skim`] — selection streams over processed files plus the compact
//!   analysis format reducer.
//! - [`mc`] — run-by-run Monte Carlo scheduling, background overlay and
//!   simulated remote-site transfers.
//! - [`catalog`] — replicated metadata catalog mapping logical files to
//!   physical replicas, with mirroring and snapshot backups.
//! - [`farm`] — farm inventory aggregation and throughput prediction.
//! - [`workflow`] — end-to-end orchestration with a single master seed.

pub mod catalog;
pub mod event;
pub mod farm;
pub mod generator;
pub mod mc;
pub mod pipeline;
pub mod production;
pub mod skim;
pub mod wire;
pub mod workflow;
