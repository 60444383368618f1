//! Multitarget tracking for a grid of non-directional amplitude sensors.
//!
//! The tracker estimates the positions and velocities of a known number of
//! targets from amplitude readings that fall off with distance. Each time
//! step minimizes an analytic negative log-likelihood (measurement term plus
//! a propagated Gaussian prior), checks the fit against a χ² gate, recovers
//! from bad local minima when needed, repairs the Hessian when a target sits
//! on top of a sensor, and finally integrates the posterior with a
//! Gauss-Laguerre × simplex-lattice cubature to obtain updated moments.
//!
//! The library also ships a scenario simulator, a bootstrap particle filter
//! baseline and the OMAT error metric used to compare them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consistency;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod hessfix;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod moments;
pub mod nll;
pub mod optimizer;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
