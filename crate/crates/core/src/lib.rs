//! Pseudo-likelihood Poisson multivariate log-Gamma (PL-PMLG) small area
//! estimation under informative sampling, with a Gaussian pseudo-likelihood
//! baseline and a direct Horvitz-Thompson estimator.

pub mod ars;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod ga;
pub mod harness;
pub mod mlg;
pub mod pmlg;
pub mod rng;

pub use error::{Error, Result};
