//! Maximum-likelihood envelope estimation for multivariate linear regression
//! when predictors and responses are missing at random.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is a pure
//! function of its inputs: file formats, the command line and thread pools
//! live in the `emenv` companion crate.
//!
//! Layout:
//!
//! - [`linalg`]: vec/vech operators, projections, pseudo-inverse, `det0`,
//!   orthonormal completion and the q² subspace correlation.
//! - [`data`]: datasets with per-cell masks and their missingness patterns.
//! - [`estep`]: conditional moments of one E-step for normal and two-point
//!   predictors, plus the closed-form observed-data log-likelihood.
//! - [`envelope`]: the Γ objective, the 1-D algorithm and the envelope M-step.
//! - [`em`]: the EM envelope loop and its baselines (standard EM, complete
//!   case, full data).
//! - [`select`]: BIC_Q and bootstrap q² dimension selection.
//! - [`inference`]: bootstrap standard errors and the gradient matrix used to
//!   project an unconstrained covariance onto the envelope parameterization.
//! - [`sim`]: parameter, data and missingness generators and the six-estimator
//!   scenario runner.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod em;
pub mod envelope;
mod error;
pub mod estep;
pub mod inference;
pub mod linalg;
pub mod runner;
pub mod select;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use linalg::Mat;
