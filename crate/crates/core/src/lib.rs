//! Anytime-valid sequential stopping for token streams.
//!
//! Each generated token contributes a clipped information-lift increment: the
//! log-ratio of the probability the full model gave the token to the
//! probability a weakened skeleton gave it. Increments feed a uniform mixture
//! of empirical-Bernstein e-processes; generation stops once the mixture
//! clears a threshold whose error budget is split across drift-triggered
//! segments. Under the null the chance of ever stopping is at most `δ`, no
//! matter when the decision is inspected.
//!
//! Modules:
//! - [`lift`]: token records and lift increments.
//! - [`eprocess`]: running estimates, per-lambda e-processes, the mixture.
//! - [`controller`]: the per-stream stopping state machine and certificates.
//! - [`skeleton`]: skeleton constructors and the acceptance diagnostics.
//! - [`simlab`]: synthetic streams and Monte Carlo calibration.
//! - [`io`]: stream, report and configuration formats.

// `!(x < bound)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod controller;
pub mod eprocess;
pub mod io;
pub mod lift;
pub mod simlab;
pub mod skeleton;

pub use config::{ConfigError, EngineConfig};
pub use controller::{Certificate, ControlError, Controller, Engine, Outcome, StepVerdict, VerdictKind};
pub use lift::{compute_lift, LiftConfig, LiftIncrement, TokenRecord};
