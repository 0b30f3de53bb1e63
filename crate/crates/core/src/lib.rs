//! Numerical laboratory for the stochastic Allen-Cahn equation with the
//! Flory-Huggins logarithmic potential and degenerate multiplicative noise.
//!
//! The crate is organised bottom-up:
//!
//! - [`potential`]: the logarithmic double well, its monotone part, the
//!   resolvent/Yosida machinery and the mollified drift `F_λ'`.
//! - [`noise`]: the degenerate coefficient family `h_k` and its mollification.
//! - [`spatial`]: spectral discretisation of `C = I - Δ`, semigroups,
//!   Gaussian covariances `Q_t` and discrete H/V/Z norms.
//! - [`integrator`]: the bound-preserving splitting scheme, the regularised
//!   Euler-Maruyama scheme, synchronous coupling and first variations.
//! - [`kolmogorov`]: OU-smoothed coefficients, the Monte-Carlo resolvent
//!   solution of the regularised Kolmogorov equation and its residuals.
//! - [`ergodicity`]: time averages, moment reports and mixing diagnostics.
//! - [`harness`]: configuration, orchestration and result emission.

pub mod error;
pub mod ergodicity;
pub mod harness;
pub mod integrator;
pub mod kolmogorov;
pub mod noise;
pub mod potential;
pub mod quadrature;
pub mod rng;
pub mod spatial;
pub mod stats;
pub mod tabulate;

pub use error::{Error, Result};
