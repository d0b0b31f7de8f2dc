//! Numerical laboratory for principal component regression.
//!
//! The model is a linear functional regression in a fixed orthonormal basis:
//! observations `Y_i = <f, X_i> + eps_i` with centered design vectors `X_i`
//! in `R^p` whose covariance is diagonal, `Sigma = diag(lambda_1, ...,
//! lambda_p)` with `lambda_1 >= ... >= lambda_p > 0`, and independent
//! Gaussian noise `eps_i ~ N(0, sigma^2)`. The estimator under study
//! projects onto the top `d` eigenvectors of the sample covariance
//! `Sigma_hat = X^T X / n` and solves least squares there; its oracle
//! counterpart uses the population eigenbasis instead.
//!
//! Because `Sigma` is diagonal, every quantity in the bias/variance
//! decompositions (projector alignments, excess risk, gap sums, bound
//! remainders) has a closed form in the coordinates of the sample
//! eigenvectors, and the crate computes them exactly rather than by
//! simulation. Monte Carlo enters only where expectation over the design is
//! genuinely needed, and then with fully seeded, thread-count-independent
//! reproducibility: reruns with the same config and seed are byte-identical.
//!
//! Module map:
//! - [`spectrum`]: eigenvalue families and spectral-gap combinatorics,
//! - [`datagen`]: seeded designs, regression functions, and noise,
//! - [`estimators`]: PCA step, the regression estimator, and its oracle,
//! - [`risk`]: exact risk functionals, identities, and deterministic bounds,
//! - [`harness`]: study configuration, replicate orchestration, and rate
//!   studies,
//! - [`report`]: CSV/JSON writers with 17-significant-digit floats,
//! - [`cli`]: the `pcr-lab` command-line entry points.

pub mod cli;
pub mod datagen;
pub mod estimators;
pub mod harness;
pub mod report;
pub mod risk;
pub mod spectrum;

mod error;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
