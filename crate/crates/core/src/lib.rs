//! Spatio-temporal additive models for monthly particulate matter.
//!
//! The crate is organized bottom-up:
//!
//! * [`splines`] builds low-rank thin plate and one-dimensional penalized bases.
//! * [`gam`] fits additive models by penalized least squares with GCV.
//! * [`data`] ingests monitoring records, aggregates them to months, projects
//!   coordinates, and smooths meteorological covariates.
//! * [`stm`] is the two-stage model: a backfitted first stage with site
//!   effects and monthly spatial surfaces, and a second stage regressing the
//!   site effects on space and time-invariant covariates.
//! * [`ratio`] models the log ratio of a sparse co-pollutant to predictions of
//!   the dense one.
//! * [`visibility`] turns airport visual range into a censored extinction
//!   proxy via stochastic EM.
//! * [`eval`] holds cross-validation, metrics, residual diagnostics and the
//!   synthetic data generator.

pub mod data;
pub mod eval;
pub mod error;
pub mod gam;
pub mod splines;
pub mod stm;
pub mod ratio;
pub mod types;
pub mod visibility;

pub use error::{Error, Result};
pub use types::{BoundingBox, Point, Season, Transform, YearMonth};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
