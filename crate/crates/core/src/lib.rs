//! Compact sketches for persistent-spread measurement.
//!
//! A flow's *persistent spread* is the number of distinct elements it carries
//! in every one of `t` consecutive measurement periods. This crate provides:
//!
//! - [`hll`]: single-period HyperLogLog sketches with register-wise union and
//!   intersection;
//! - [`persistent`]: a maximum-likelihood estimator of persistent spread from
//!   the register-wise intersection of per-period sketches, with error
//!   analysis and confidence intervals, plus an inclusion-exclusion baseline;
//! - [`vsketch`]: memory-shared virtual sketches, where every flow draws its
//!   registers from one physical array per period, and the noise-cancelling
//!   persistent-spread estimator on top of them;
//! - [`trace`]: a seeded synthetic multi-period trace generator with an exact
//!   ground-truth oracle and the evaluation metrics;
//! - [`snapshot`]: bit-exact on-disk snapshots of per-period register arrays;
//! - [`experiment`]: the recording/query/evaluation harness shared by the CLI
//!   and the validation suites.

pub mod experiment;
pub mod hash;
pub mod hll;
mod math;
pub mod persistent;
pub mod snapshot;
pub mod trace;
pub mod vsketch;

pub use hll::{ElementHasher, HllSketch};
pub use persistent::{IntersectionModel, PersistentEstimate, RegisterHistogram};
pub use trace::{GroundTruth, TraceSpec};
pub use vsketch::{HashScheme, PhysicalRegisterArray, SeedTable};

pub use math::{mean, sample_std};
