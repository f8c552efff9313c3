//! Strict-overlap diagnostics for causal inference.
//!
//! Closed-form limits that strict overlap places on how far the treated and
//! control covariate laws can drift apart, exact finite-support oracles for
//! checking them, simulated covariate processes, sample-based audits, and
//! the verification and sweep harness behind the `overlap-lab` binary.

pub mod bounds;
pub mod dataset;
pub mod discrete;
pub mod estimation;
pub mod exec;
pub mod harness;
pub mod linalg;
pub mod processes;
