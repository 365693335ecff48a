//! A desk-scale laboratory for staged, high-staleness GRPO.
//!
//! The crate pairs a linear-softmax policy on a modular digit-sum task with
//! the pieces needed to study stale-rollout optimization:
//!
//! - [`rollout`]: frozen-policy generation with stored behavior log-probs;
//! - [`update`]: the clipped surrogate with the negative-advantage veto;
//! - [`orchestrator`]: multi-stage and fixed-dataset training loops;
//! - [`asyncsim`]: a discrete-event model of staged vs asynchronous scheduling;
//! - [`theory`]: exact occupancy measures and prefix chi-square divergences;
//! - [`config`]: run configuration and presets;
//! - [`runner`]: executes a configuration, writing files through [`report`].

pub mod error;
pub mod linalg;
pub mod seeding;
pub mod selfcheck;

pub mod asyncsim;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod orchestrator;
pub mod plot;
pub mod policy;
pub mod report;
pub mod rollout;
pub mod runner;
pub mod theory;
pub mod update;

pub use error::{Error, Result};
