//! Estimation of ordinal survey outcomes under nonignorable unit
//! nonresponse.
//!
//! The model couples two latent-Gaussian ordered equations — one for the
//! outcome, one for an ordinal response-propensity proxy with unit
//! nonresponse embedded as the top category — through a latent error
//! correlation `rho`. Fitting is by maximum likelihood over respondents
//! plus a nonresponse mass term driven by the number of missing units,
//! which may be known or swept as a sensitivity parameter. Post-fit, the
//! crate derives outcome distributions for the overall population,
//! respondents, and nonrespondents, with delta-method standard errors.
//!
//! Modules:
//! - [`bvn`] — univariate/bivariate normal probability kernel.
//! - [`model`] — domain types and the constrained/unconstrained parameter
//!   transform.
//! - [`likelihood`] — cell aggregation and log-likelihood evaluation.
//! - [`estimator`] — quasi-Newton fitting, covariance, delta method.
//! - [`population`] — derived outcome distributions, baselines, and the
//!   nonresponse-rate sensitivity grid.
//! - [`simulate`] — seeded synthetic-data generation for oracle testing.
//! - [`data`], [`config`], [`output`], [`cli`] — ingestion, run
//!   configuration, serialization, and the command-line surface.

pub mod bvn;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod estimator;
pub mod likelihood;
pub mod model;
pub mod optimize;
pub mod ordered_probit;
pub mod output;
pub mod population;
pub mod simulate;

pub use error::{Error, Result};
