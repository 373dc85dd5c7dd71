//! Simulation and surrogate-learning laboratory for control-driven open
//! quantum systems.
//!
//! The crate has three layers:
//!
//! * physics: exact state utilities ([`qstate`]), a driven dissipative qubit
//!   simulator ([`qubit`]) and a three-level quantum-memory solver ([`eit`])
//!   that integrates the master equation with an exponential-time-differencing
//!   step and the probe field with a 4th-order Adams-Bashforth-Moulton sweep;
//! * learning: token grids and dataset files ([`tokens`]), a tape-based
//!   gradient engine ([`graph`]), regional attention ([`attention`]), the
//!   autoregressive surrogate model ([`model`]) and training ([`train`]);
//! * evaluation: the metric suite, the solver-vs-model speed benchmark and
//!   report emission ([`eval`]).

pub mod attention;
pub mod error;
pub mod eit;
pub mod eval;
pub mod graph;
pub mod model;
pub mod qstate;
pub mod qubit;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
