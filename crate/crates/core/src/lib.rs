//! Decentralized optimization with compressed communication.
//!
//! The crate simulates the compressed gradient tracking (C-GT) method on a
//! network of agents: every agent keeps a local copy of the decision variable
//! and a gradient tracker, and exchanges only compressed differences against a
//! running reference point with its neighbors.
//!
//! Modules, bottom-up:
//!
//! - [`graph`]: connected topologies and doubly stochastic mixing matrices.
//! - [`compressors`]: the compression operator family, its constants and bit
//!   costs.
//! - [`problems`]: strongly convex local objectives (ridge regression).
//! - [`cgt`]: the iteration engine and its telemetry.
//! - [`analysis`]: step-size bounds, the 5x5 error transition matrix and the
//!   linear-rate certificate.
//! - [`harness`]: experiment configs, sweeps and CSV / plot-data output.

pub mod analysis;
pub mod cgt;
pub mod compressors;
mod error;
pub mod graph;
pub mod harness;
pub mod problems;
pub mod seed;

pub use error::{Error, Result};
