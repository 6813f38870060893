//! The three distributed steering algorithms and a small centralized
//! reference solver.
//!
//! All variants share the same outer loop: compile a local conic program per
//! agent from the current linearization points, solve the programs in
//! parallel, then run the consensus averaging and dual updates. They differ
//! in which quantities neighbors agree on:
//!
//! * `fcc` - consensus on feed-forward controls and feedback gains; pair
//!   constraints are joint tail-bound cones (least conservative).
//! * `pcc` - consensus on feed-forward controls and per-step confidence
//!   radii; gains stay local, pair constraints become mean-separation rows.
//! * `mc` - consensus on feed-forward controls only; radii are fixed up
//!   front and the covariance part is solved once per agent before the loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which consensus variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoKind {
    Fcc,
    Pcc,
    Mc,
}

impl fmt::Display for AlgoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlgoKind::Fcc => "fcc",
            AlgoKind::Pcc => "pcc",
            AlgoKind::Mc => "mc",
        })
    }
}

impl FromStr for AlgoKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcc" => Ok(AlgoKind::Fcc),
            "pcc" => Ok(AlgoKind::Pcc),
            "mc" => Ok(AlgoKind::Mc),
            other => Err(Error::Parse(format!(
                "unknown algorithm {other:?}; expected fcc, pcc, or mc"
            ))),
        }
    }
}

/// How the per-step confidence-ball bound is enforced in the `pcc` local
/// programs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PccMode {
    /// Frobenius-norm cone: sufficient and cheaper (a single SOC per step).
    Frobenius,
    /// Exact spectral bound as a PSD block per step.
    Spectral,
}

/// Initial guess for the feed-forward controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    /// All variables start at zero.
    Zero,
    /// Feed-forward starts at the minimum-energy input that already meets
    /// the terminal mean, so round-1 mean paths interpolate start to target.
    StraightLine,
}

/// Tuning knobs for one algorithm run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    pub kind: AlgoKind,
    /// Maximum consensus rounds.
    pub rounds: usize,
    /// Penalty on the feed-forward consensus channel.
    pub rho_v: f64,
    /// Penalty on the gain consensus channel (`fcc` only).
    pub rho_k: f64,
    /// Penalty on the radius consensus channel (`pcc` only).
    pub rho_r: f64,
    /// Fixed per-agent confidence radii (`mc` only); empty otherwise.
    pub r_hat: Vec<f64>,
    pub pcc_mode: PccMode,
    pub init: InitPolicy,
    /// Residual threshold for the early-stop rule (scaled by the copy
    /// dimension square root).
    pub stop_tol: f64,
    /// Run exactly `rounds` rounds even if residuals drop below the rule.
    pub fixed_rounds: bool,
    /// Weight on the linearized blocks in the descent diagnostic.
    pub tau: f64,
}

impl AlgorithmConfig {
    /// Baseline settings: 30 rounds, penalties (1, 1, 10), Frobenius ball
    /// mode, zero initialization, early stop at 1e-3.
    pub fn new(kind: AlgoKind) -> Self {
        AlgorithmConfig {
            kind,
            rounds: 30,
            rho_v: 1.0,
            rho_k: 1.0,
            rho_r: 10.0,
            r_hat: Vec::new(),
            pcc_mode: PccMode::Frobenius,
            init: InitPolicy::Zero,
            stop_tol: 1e-3,
            fixed_rounds: false,
            tau: 1.0,
        }
    }

    pub fn validate(&self, num_agents: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Invalid("algorithm.rounds: must be at least 1".into()));
        }
        for (name, value) in [
            ("algorithm.rho_v", self.rho_v),
            ("algorithm.rho_k", self.rho_k),
            ("algorithm.rho_r", self.rho_r),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Invalid(format!("{name}: penalty must be positive, got {value}")));
            }
        }
        if !(self.stop_tol > 0.0 && self.stop_tol.is_finite()) {
            return Err(Error::Invalid(format!(
                "algorithm.stop_tol: must be positive, got {}",
                self.stop_tol
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Invalid(format!("algorithm.tau: must be positive, got {}", self.tau)));
        }
        if self.kind == AlgoKind::Mc {
            if self.r_hat.len() != num_agents {
                return Err(Error::Invalid(format!(
                    "algorithm.r_hat: mc needs one radius per agent ({num_agents}), got {}",
                    self.r_hat.len()
                )));
            }
            for (i, &r) in self.r_hat.iter().enumerate() {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::Invalid(format!(
                        "algorithm.r_hat[{i}]: must be positive, got {r}"
                    )));
                }
            }
        }
        Ok(())
    }
}
