//! Distributed covariance steering for multi-agent linear-Gaussian systems.
//!
//! Each agent steers its state distribution from `N(mu_s, Sigma_s)` to a target
//! mean `mu_f` with terminal covariance dominated by `Sigma_f`, while keeping
//! the probability of colliding with obstacles or other agents below a risk
//! level `eps` at every time step. Three algorithm variants trade optimality
//! for computation:
//!
//! * full chance constraints (joint position distributions, per-pair
//!   second-order cones),
//! * projected chance constraints (per-agent confidence radii around the mean
//!   path),
//! * fixed margins around the mean path (cheapest, most conservative).
//!
//! All three run over a neighbor graph with a consensus ADMM engine; local
//! subproblems compile to a common conic form solved by the embedded
//! operator-splitting solver.

pub mod algorithms;
pub mod cli;
pub mod conic;
pub mod consensus;
pub mod constraints;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod scenario;
pub mod stats;

pub use error::{Error, Result};
