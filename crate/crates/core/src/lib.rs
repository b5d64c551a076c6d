//! Minimal transition matrices for nonhomogeneous continuous-time Markov
//! chains.
//!
//! Given a rate matrix Q(t) that may vary measurably in time and may lose
//! mass (row sums below zero), this crate constructs the smallest transition
//! matrix compatible with those rates as a series of recursive convolution
//! integrals, and cross-examines the result from independent directions:
//!
//! - [`kernel`] builds the series, certifies its truncation, and measures the
//!   forward/backward integral-equation residuals and the mass defect;
//! - [`oracle`] recomputes the same object to machine precision for
//!   piecewise-constant rates via products of interval matrix exponentials on
//!   a cemetery-augmented chain, and builds non-minimal alternatives that
//!   must dominate the minimal solution;
//! - [`properties`] checks the transition-matrix axioms numerically on any
//!   computed field;
//! - [`sampler`] simulates the underlying jump process exactly and compares
//!   empirical frequencies;
//! - [`policy`] compiles piecewise-constant control policies into rate
//!   matrices (the motivating construction for discontinuous rates);
//! - [`verify`] bundles all checks into one report; [`config`] and
//!   [`report`] are the file-facing surfaces used by the CLI.

pub mod config;
pub mod error;
pub mod expm;
pub mod kernel;
pub mod oracle;
pub mod policy;
pub mod properties;
pub mod rates;
pub mod report;
pub mod sampler;
pub mod verify;

pub use error::{Error, Result};
